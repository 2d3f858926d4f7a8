#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace iip::grad {

// Dense n-dimensional f64 array. Training math runs in f64; datasets on
// disk are f32 (see iip::data).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
  Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<size_t>(numel_of(shape)) != v.size())
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int size(int i) const { return shape.at(static_cast<size_t>(i)); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& at(int64_t i) { return v[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return v[static_cast<size_t>(i)]; }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double x) {
    Tensor t(std::move(s));
    for (double& e : t.v) e = x;
    return t;
  }
  static Tensor scalar(double x) { return Tensor({1}, {x}); }

  static Tensor randn(std::vector<int> s, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> d(0.0, stddev);
    for (double& e : t.v) e = d(rng);
    return t;
  }
  static Tensor uniform(std::vector<int> s, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& e : t.v) e = d(rng);
    return t;
  }

  bool all_finite() const;
};

std::string shape_str(const std::vector<int>& s);

}  // namespace iip::grad
