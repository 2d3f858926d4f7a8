#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iip/data.hpp"
#include "iip/net.hpp"

namespace iip::train {

using sim::Property;

struct StageSpec {
  std::vector<Property> active;  // cumulative across stages
  int minibatches_per_step = 0;
  int steps = 0;
};

struct LambdaState {
  double lambda = 1e-3;
  double ema_mle = 0.0;
  double ema_ave = 0.0;
  bool ema_ready = false;
  int update_interval = 10;
  double decay = 0.9;
  // target ||lambda * grad(L_ave)|| = balance_ratio * ||grad(L_mle)||; 1 is
  // exact magnitude matching, smaller keeps the constraint subordinate
  double balance_ratio = 1.0;
  int warmup_steps = 0;   // no lambda refresh before this step
  int max_updates = -1;   // anchor count; <0 means refresh forever
  int updates_done = 0;
};

// feed the norm EMAs; refresh lambda every update_interval steps after warmup
void update_lambda(LambdaState& state, double grad_norm_mle, double grad_norm_ave, int step);

struct TrainerConfig {
  grad::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::vector<Property> order = {Property::mass, Property::speed, Property::friction};
  std::vector<int> stage_steps = {120, 120, 160};
  double lambda_init = 1e-3;
  int lambda_interval = 10;
  double ema_decay = 0.9;
  double lambda_ratio = 1.0;  // gradient-magnitude target, see LambdaState
  int lambda_warmup = 20;
  // Eq-4 lambda stays constant after being anchored to the measured gradient
  // ratio; a continuously re-matched lambda collapses the code at this scale
  int lambda_anchor_updates = 3;
  std::optional<double> fixed_lambda;  // pin lambda (0 = unconstrained baseline)
  int eval_interval = 25;
  int patience = 5;
  int validation_cap = 10;  // sequences used for the plateau check
  uint64_t seed = 1;
  bool measure_wall = false;  // keep metrics byte-reproducible by default
};

// stage 1: {p1} with 3 mini-batches per step, all from D^{p1};
// stage 2: {p1,p2} with 2 per step, one per property;
// stage 3: all three with 3 per step, one per property
std::vector<StageSpec> staggered_schedule(const TrainerConfig& cfg);

// graph builders for the objective
int loss_mle_node(grad::Graph& g, int predictions, int targets);  // Σ_k |ŷ_k - y_k|
// Σ_k ||φ̄_k - mean_k φ̄_k||² over a [5,D] code matrix; the varying block is
// excluded, so its gradient through this term is exactly zero
int loss_ave_node(grad::Graph& g, int codes, const net::CodeLayout& layout, Property p);

struct StepMetrics {
  int64_t step = 0;
  int stage = 0;
  double l_mle = 0.0;    // per-sequence mean of the prediction loss
  double l_ave = 0.0;    // per-mini-batch mean of the constraint loss
  double lambda = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;  // 0 unless measure_wall
};

std::string metrics_csv(const std::vector<StepMetrics>& rows);

struct TrainResult {
  std::vector<StepMetrics> metrics;
  std::vector<int64_t> stage_end_steps;
  uint64_t final_step = 0;
};

struct TrainDiverged : std::runtime_error {
  explicit TrainDiverged(const std::string& m) : std::runtime_error(m) {}
};

// Runs the staggered curriculum with Adam. When out_dir is non-empty, writes
// metrics.csv, stage<k>.ckpt at each stage boundary and final.ckpt. On a
// non-finite loss the last good parameters are saved before aborting.
TrainResult train(net::PhysNet& model, data::DatasetReader& reader, const TrainerConfig& cfg,
                  const std::string& out_dir = "");

}  // namespace iip::train
