#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "iip/data.hpp"
#include "iip/net.hpp"

namespace iip::eval {

using sim::Property;

enum class Metric { l1_sum, sse };
const char* metric_name(Metric m);
// intensity differences on a 0..255 scale, summed over pixels and channels
double pixel_error(const sim::Frame& pred, const sim::Frame& gt, Metric metric);

// ------------------------------------------------------------- assignments

struct DimAssignment {
  std::array<std::vector<int>, 3> dims;  // indexed by Property, each of size k
  int k = 0;
};

// per-dimension variance within each [5,D] code matrix, averaged across
// batches; top-k indices, ties broken toward the lowest index
std::vector<int> top_variance_dims(const std::vector<grad::Tensor>& batch_codes, int k);
DimAssignment baseline_assign_dims(const net::PhysNet& model, data::DatasetReader& reader);

// a property's code dimensions for either model kind: the layout block for
// the constrained model, the variance-assigned set for the baseline
struct ModelBlocks {
  const net::PhysNet* model = nullptr;
  std::array<std::vector<int>, 3> prop_dims;
  std::string method;
};
ModelBlocks disentangled_blocks(const net::PhysNet& model, std::string method = "ours");
ModelBlocks assigned_blocks(const net::PhysNet& model, const DimAssignment& asg,
                            std::string method = "baseline");

// --------------------------------------------------------- code surgeries

grad::Tensor gather_dims(const grad::Tensor& code, const std::vector<int>& dims);
grad::Tensor with_dims(const grad::Tensor& code, const std::vector<int>& dims,
                       const grad::Tensor& values);

// t = (i-1)/4 blend of the property dims, everything else from z_low
grad::Tensor interpolate_code(const grad::Tensor& z_low, const grad::Tensor& z_high,
                              int target_scale, const std::vector<int>& dims);
// property dims from the donor, everything else from z_a
grad::Tensor switch_property(const grad::Tensor& z_a, const grad::Tensor& z_b,
                             const std::vector<int>& dims);

// ----------------------------------------------------------------- reports

struct EvalCell {
  std::string method;
  std::string condition;
  double value = 0.0;
  int64_t count = 0;
};

struct EvalReport {
  std::string name;
  std::string metric;
  std::vector<EvalCell> cells;

  double get(const std::string& method, const std::string& condition) const;
};

std::string report_csv(const EvalReport& r);
// rows = methods, columns = conditions (Table-2 shape)
std::string report_wide_csv(const EvalReport& r);

// -------------------------------------------------------------- protocols

// direct 5th-frame prediction error, per-sequence mean over the split
EvalReport eval_prediction(const std::vector<ModelBlocks>& models, data::DatasetReader& reader,
                           data::Split split, Metric metric, int max_sequences = 0);

// shape_test: interpolate i=2..5 inside held-out-pair batches;
// param_test: i=3 in the (3,3) contexts whose middle member is the unseen cell
EvalReport eval_interpolation(const std::vector<ModelBlocks>& models, data::DatasetReader& reader,
                              data::Split split, Metric metric, int max_contexts = 0);

struct RatioConfig {
  int hidden = 64;  // paper-scale runs use 256
  int steps = 400;
  double lr = 1e-3;
  uint64_t seed = 11;
  int max_contexts = 0;
};

// 2-layer MLPs F^p_2 / F^p_3 regressed on train-split code pairs
class RatioNets {
 public:
  grad::ParamSet& net(Property p, int factor);
  const grad::ParamSet& net(Property p, int factor) const;
  grad::Tensor apply(Property p, int factor, const grad::Tensor& block) const;
  std::map<std::pair<int, int>, grad::ParamSet> nets;
};

RatioNets train_ratio_nets(const ModelBlocks& mb, data::DatasetReader& reader,
                           const RatioConfig& cfg);
// decodes against the source sequence's 4th frame and scores against the
// ground truth at the scaled parameter; *_vs_unscaled rows score the same
// prediction against the unscaled target
EvalReport eval_ratio(const ModelBlocks& mb, const RatioNets& nets, data::DatasetReader& reader,
                      data::Split split, Metric metric, int max_contexts = 0);

// replaces phi^p with the same-scale block from a different shape pair
EvalReport eval_switch(const ModelBlocks& mb, data::DatasetReader& reader, data::Split split,
                       Metric metric, int max_pairs = 0);

struct FlowBaselineConfig {
  int train_steps = 250;
  int batch = 5;
  double lr = 1e-3;
  uint64_t seed = 23;
  int max_eval = 0;
};

// (a) the same architecture trained on ground-truth 4->5 flow;
// (b) per-pixel linear extrapolation of the three input flows
EvalReport flow_baselines(data::DatasetReader& reader, const net::ModelConfig& arch,
                          const FlowBaselineConfig& cfg, data::Split eval_split, Metric metric);
// the linear-extrapolation predictor on one sequence (unit-testable core)
sim::FlowField linear_flow_extrapolation(const sim::Sequence& seq);

// ------------------------------------------------------------------ scores

struct DisentanglementScore {
  std::array<double, 3> score{};  // per property, in [0,1]
  std::array<double, 3> null_score{};
  int64_t batches = 0;
};

// fraction of within-batch per-dimension variance carried by `dims`
// for one [K,D] code matrix; the building block of the score
double variance_share(const grad::Tensor& codes, const std::vector<int>& dims);

// share of within-batch code variance landing in the property's dims,
// averaged over complete held-out batches; the null redraws the dims
// uniformly at random
DisentanglementScore disentanglement_score(const ModelBlocks& mb, data::DatasetReader& reader,
                                           data::Split split, uint64_t null_seed = 7,
                                           int null_draws = 64, int max_contexts = 0);

}  // namespace iip::eval
