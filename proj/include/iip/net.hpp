#pragma once

#include <string>
#include <utility>
#include <vector>

#include "iip/graph.hpp"
#include "iip/optim.hpp"
#include "iip/sim.hpp"

namespace iip::net {

using sim::Property;

// Bottleneck block layout: contiguous [mass | speed | friction | intrinsic].
struct CodeLayout {
  int d_mass = 8;
  int d_speed = 8;
  int d_friction = 8;
  int d_intrinsic = 40;

  int total() const { return d_mass + d_speed + d_friction + d_intrinsic; }
  int block_size(Property p) const {
    switch (p) {
      case Property::mass: return d_mass;
      case Property::speed: return d_speed;
      case Property::friction: return d_friction;
    }
    return 0;
  }
  int block_offset(Property p) const {
    switch (p) {
      case Property::mass: return 0;
      case Property::speed: return d_mass;
      case Property::friction: return d_mass + d_speed;
    }
    return 0;
  }
  bool valid() const { return d_mass > 0 && d_speed > 0 && d_friction > 0 && d_intrinsic > 0; }
};

struct PhysicsCode {
  grad::Tensor z;  // length layout.total()
  CodeLayout layout;
};

grad::Tensor phi(const PhysicsCode& code, Property p);
// the other two physics blocks plus the intrinsic block, in layout order
grad::Tensor phi_bar(const PhysicsCode& code, Property p);
PhysicsCode assemble_code(const grad::Tensor& m, const grad::Tensor& s, const grad::Tensor& f,
                          const grad::Tensor& intrinsic, const CodeLayout& layout);

struct ModelConfig {
  int resolution = 64;
  int channels = 3;
  std::vector<int> stem_widths = {16, 24, 32};  // stride-2 conv stem, shared across frames
  int head_conv = 48;
  int fc_hidden = 128;
  CodeLayout layout;
  int decoder_base = 32;  // channels at the 4x4 decoder seed
  uint64_t seed = 1;

  int feature_hw() const {
    int h = resolution;
    for (size_t i = 0; i < stem_widths.size(); ++i) h /= 2;
    return h;
  }
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// frames -> [N,C,H,W] f64 (HWC to CHW); values stay in [0,1]
grad::Tensor frames_to_tensor(const std::vector<const sim::Frame*>& frames);
sim::Frame tensor_to_frame(const grad::Tensor& t, int n);
sim::FlowField tensor_to_flow(const grad::Tensor& t, int n);
grad::Tensor flow_to_tensor(const std::vector<const sim::FlowField*>& flows);

// Flow-warping encoder-decoder: 4 input frames -> physics code -> flow ->
// warped prediction of the 5th frame. The final decoder layer is
// zero-initialized so an untrained model is the identity warp.
class PhysNet {
 public:
  explicit PhysNet(const ModelConfig& cfg);
  PhysNet(const ModelConfig& cfg, grad::ParamSet params);

  const ModelConfig& config() const { return cfg_; }
  grad::ParamSet& params() { return params_; }
  const grad::ParamSet& params() const { return params_; }

  // one graph leaf per parameter, in ParamSet order
  std::vector<int> bind(grad::Graph& g, bool requires_grad = true) const;

  // frames node [B*4, C, H, W] -> code node [B, layout.total]
  int encode_node(grad::Graph& g, const std::vector<int>& leafs, int frames, int batch) const;
  // code [B,D], frame4 [B,C,H,W] -> (flow [B,2,H,W], prediction [B,C,H,W])
  std::pair<int, int> decode_node(grad::Graph& g, const std::vector<int>& leafs, int code,
                                  int frame4) const;

  // value-level paths (no gradients)
  grad::Tensor encode_batch(const grad::Tensor& frames, int batch) const;
  std::pair<grad::Tensor, grad::Tensor> decode_batch(const grad::Tensor& codes,
                                                     const grad::Tensor& frame4s) const;

  // sequences: frames 0..3 in, prediction of frame 4 out
  grad::Tensor codes_for(const std::vector<const sim::Sequence*>& seqs) const;
  grad::Tensor predict(const std::vector<const sim::Sequence*>& seqs) const;

  void save(const std::string& path, uint64_t step) const;
  static PhysNet load(const std::string& path);

 private:
  ModelConfig cfg_;
  grad::ParamSet params_;

  struct Stage {
    int out_ch;
    int stride;
  };
  std::vector<Stage> decoder_stages() const;
  void init_params();
  int leaf_for(const std::vector<int>& leafs, const std::string& name) const;
};

}  // namespace iip::net
