#include "iip/optim.hpp"

#include <cmath>

#include "iip/graph.hpp"

namespace iip::grad {

int ParamSet::find(const std::string& name) const {
  for (size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return static_cast<int>(i);
  return -1;
}

Param& ParamSet::add(const std::string& name, Tensor init) {
  if (find(name) >= 0) throw UsageError("paramset: duplicate parameter " + name);
  Param p;
  p.name = name;
  p.grad = Tensor(init.shape);
  p.m = Tensor(init.shape);
  p.s = Tensor(init.shape);
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamSet::get(const std::string& name) {
  int i = find(name);
  if (i < 0) throw UsageError("paramset: unknown parameter " + name);
  return params_[static_cast<size_t>(i)];
}

const Param& ParamSet::get(const std::string& name) const {
  int i = find(name);
  if (i < 0) throw UsageError("paramset: unknown parameter " + name);
  return params_[static_cast<size_t>(i)];
}

bool ParamSet::has(const std::string& name) const { return find(name) >= 0; }

int64_t ParamSet::scalar_count() const {
  int64_t n = 0;
  for (const Param& p : params_) n += p.value.numel();
  return n;
}

void ParamSet::zero_grads() {
  for (Param& p : params_) {
    for (double& g : p.grad.v) g = 0.0;
    p.grad_set = false;
  }
}

void ParamSet::accumulate_grads(const std::vector<Tensor>& grads, double factor) {
  if (grads.size() != params_.size()) throw UsageError("paramset: gradient count mismatch");
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = params_[i];
    if (!grads[i].same_shape(p.value))
      throw ShapeError("paramset: gradient shape mismatch for " + p.name);
    for (size_t j = 0; j < p.grad.v.size(); ++j) p.grad.v[j] += factor * grads[i].v[j];
    p.grad_set = true;
  }
}

void ParamSet::adam_step(const AdamConfig& cfg) {
  for (const Param& p : params_)
    if (!p.grad_set) throw UsageError("adam_step: missing gradient for parameter " + p.name);
  ++step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
  for (Param& p : params_) {
    for (size_t i = 0; i < p.value.v.size(); ++i) {
      const double g = p.grad.v[i];
      p.m.v[i] = cfg.beta1 * p.m.v[i] + (1.0 - cfg.beta1) * g;
      p.s.v[i] = cfg.beta2 * p.s.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.m.v[i] / bc1;
      const double shat = p.s.v[i] / bc2;
      p.value.v[i] -= cfg.lr * mhat / (std::sqrt(shat) + cfg.eps);
    }
  }
  zero_grads();
}

}  // namespace iip::grad
