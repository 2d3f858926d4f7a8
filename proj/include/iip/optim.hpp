#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iip/tensor.hpp"

namespace iip::grad {

// One learned tensor plus its gradient buffer and Adam moment slots.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;  // accumulated between steps, cleared by adam_step
  Tensor m;     // first moment
  Tensor s;     // second moment
  bool grad_set = false;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Ordered parameter map. Insertion order is the canonical order used by the
// checkpoint format and by gradient reduction, so runs stay reproducible.
class ParamSet {
 public:
  Param& add(const std::string& name, Tensor init);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool has(const std::string& name) const;

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  size_t count() const { return params_.size(); }
  int64_t scalar_count() const;

  void zero_grads();
  // grads[i] scaled by `factor` is accumulated into parameter i's gradient.
  void accumulate_grads(const std::vector<Tensor>& grads, double factor);

  // Standard Adam with bias correction; `step_count` persists across calls.
  // Throws UsageError naming the parameter if any gradient is missing.
  void adam_step(const AdamConfig& cfg);

  uint64_t step_count = 0;

 private:
  std::vector<Param> params_;
  int find(const std::string& name) const;
};

}  // namespace iip::grad
