#include "iip/net.hpp"

#include <nlohmann/json.hpp>

#include "iip/checkpoint.hpp"

namespace iip::net {

using grad::Graph;
using grad::ShapeError;
using grad::Tensor;
using ordered_json = nlohmann::ordered_json;

Tensor phi(const PhysicsCode& code, Property p) {
  const int off = code.layout.block_offset(p);
  const int len = code.layout.block_size(p);
  Tensor out({len});
  for (int i = 0; i < len; ++i) out.v[static_cast<size_t>(i)] = code.z.v[static_cast<size_t>(off + i)];
  return out;
}

Tensor phi_bar(const PhysicsCode& code, Property p) {
  const int off = code.layout.block_offset(p);
  const int len = code.layout.block_size(p);
  const int total = code.layout.total();
  Tensor out({total - len});
  int j = 0;
  for (int i = 0; i < total; ++i) {
    if (i >= off && i < off + len) continue;
    out.v[static_cast<size_t>(j++)] = code.z.v[static_cast<size_t>(i)];
  }
  return out;
}

PhysicsCode assemble_code(const Tensor& m, const Tensor& s, const Tensor& f,
                          const Tensor& intrinsic, const CodeLayout& layout) {
  if (m.numel() != layout.d_mass || s.numel() != layout.d_speed ||
      f.numel() != layout.d_friction || intrinsic.numel() != layout.d_intrinsic)
    throw ShapeError("assemble_code: block lengths do not match the layout");
  PhysicsCode code;
  code.layout = layout;
  code.z = Tensor({layout.total()});
  size_t k = 0;
  for (const Tensor* part : {&m, &s, &f, &intrinsic})
    for (double x : part->v) code.z.v[k++] = x;
  return code;
}

// ------------------------------------------------------------- conversions

Tensor frames_to_tensor(const std::vector<const sim::Frame*>& frames) {
  if (frames.empty()) throw ShapeError("frames_to_tensor: empty input");
  const sim::Frame& f0 = *frames.front();
  Tensor t({static_cast<int>(frames.size()), f0.channels, f0.height, f0.width});
  const int64_t plane = static_cast<int64_t>(f0.height) * f0.width;
  for (size_t n = 0; n < frames.size(); ++n) {
    const sim::Frame& f = *frames[n];
    if (f.height != f0.height || f.width != f0.width || f.channels != f0.channels)
      throw ShapeError("frames_to_tensor: inconsistent frame shapes");
    for (int i = 0; i < f.height; ++i)
      for (int j = 0; j < f.width; ++j)
        for (int c = 0; c < f.channels; ++c)
          t.v[(static_cast<int64_t>(n) * f.channels + c) * plane + i * f.width + j] =
              static_cast<double>(f.pixels[(static_cast<size_t>(i) * f.width + j) * f.channels + c]);
  }
  return t;
}

sim::Frame tensor_to_frame(const Tensor& t, int n) {
  if (t.rank() != 4) throw ShapeError("tensor_to_frame: expected [N,C,H,W]");
  sim::Frame f;
  f.channels = t.size(1);
  f.height = t.size(2);
  f.width = t.size(3);
  f.pixels.resize(static_cast<size_t>(f.height) * f.width * f.channels);
  const int64_t plane = static_cast<int64_t>(f.height) * f.width;
  for (int i = 0; i < f.height; ++i)
    for (int j = 0; j < f.width; ++j)
      for (int c = 0; c < f.channels; ++c)
        f.pixels[(static_cast<size_t>(i) * f.width + j) * f.channels + c] = static_cast<float>(
            t.v[(static_cast<int64_t>(n) * f.channels + c) * plane + i * f.width + j]);
  return f;
}

sim::FlowField tensor_to_flow(const Tensor& t, int n) {
  if (t.rank() != 4 || t.size(1) != 2) throw ShapeError("tensor_to_flow: expected [N,2,H,W]");
  sim::FlowField fl;
  fl.height = t.size(2);
  fl.width = t.size(3);
  fl.d.resize(static_cast<size_t>(fl.height) * fl.width * 2);
  const int64_t plane = static_cast<int64_t>(fl.height) * fl.width;
  for (int i = 0; i < fl.height; ++i)
    for (int j = 0; j < fl.width; ++j) {
      fl.d[(static_cast<size_t>(i) * fl.width + j) * 2] =
          static_cast<float>(t.v[static_cast<int64_t>(n) * 2 * plane + i * fl.width + j]);
      fl.d[(static_cast<size_t>(i) * fl.width + j) * 2 + 1] =
          static_cast<float>(t.v[(static_cast<int64_t>(n) * 2 + 1) * plane + i * fl.width + j]);
    }
  return fl;
}

Tensor flow_to_tensor(const std::vector<const sim::FlowField*>& flows) {
  if (flows.empty()) throw ShapeError("flow_to_tensor: empty input");
  const sim::FlowField& f0 = *flows.front();
  Tensor t({static_cast<int>(flows.size()), 2, f0.height, f0.width});
  const int64_t plane = static_cast<int64_t>(f0.height) * f0.width;
  for (size_t n = 0; n < flows.size(); ++n) {
    const sim::FlowField& fl = *flows[n];
    if (fl.height != f0.height || fl.width != f0.width)
      throw ShapeError("flow_to_tensor: inconsistent flow shapes");
    for (int i = 0; i < fl.height; ++i)
      for (int j = 0; j < fl.width; ++j) {
        t.v[static_cast<int64_t>(n) * 2 * plane + i * fl.width + j] = fl.dx(i, j);
        t.v[(static_cast<int64_t>(n) * 2 + 1) * plane + i * fl.width + j] = fl.dy(i, j);
      }
  }
  return t;
}

// ------------------------------------------------------------------ config

std::string model_config_to_json(const ModelConfig& cfg) {
  ordered_json j;
  j["resolution"] = cfg.resolution;
  j["channels"] = cfg.channels;
  j["stem_widths"] = cfg.stem_widths;
  j["head_conv"] = cfg.head_conv;
  j["fc_hidden"] = cfg.fc_hidden;
  j["layout"] = {cfg.layout.d_mass, cfg.layout.d_speed, cfg.layout.d_friction,
                 cfg.layout.d_intrinsic};
  j["decoder_base"] = cfg.decoder_base;
  j["seed"] = cfg.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  ModelConfig cfg;
  cfg.resolution = j.at("resolution").get<int>();
  cfg.channels = j.at("channels").get<int>();
  cfg.stem_widths = j.at("stem_widths").get<std::vector<int>>();
  cfg.head_conv = j.at("head_conv").get<int>();
  cfg.fc_hidden = j.at("fc_hidden").get<int>();
  const auto lay = j.at("layout");
  cfg.layout.d_mass = lay.at(0).get<int>();
  cfg.layout.d_speed = lay.at(1).get<int>();
  cfg.layout.d_friction = lay.at(2).get<int>();
  cfg.layout.d_intrinsic = lay.at(3).get<int>();
  cfg.decoder_base = j.at("decoder_base").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

// ----------------------------------------------------------------- PhysNet

namespace {
bool pow2_from(int x, int base) {
  if (x < base) return false;
  while (x > base) {
    if (x % 2) return false;
    x /= 2;
  }
  return true;
}
}  // namespace

PhysNet::PhysNet(const ModelConfig& cfg) : cfg_(cfg) {
  if (!cfg_.layout.valid()) throw std::invalid_argument("model: all layout blocks must be positive");
  if (cfg_.stem_widths.empty()) throw std::invalid_argument("model: empty encoder stem");
  if (!pow2_from(cfg_.resolution, 4) || cfg_.feature_hw() < 1)
    throw std::invalid_argument("model: resolution must be 4*2^k and larger than the stem");
  init_params();
}

PhysNet::PhysNet(const ModelConfig& cfg, grad::ParamSet params) : PhysNet(cfg) {
  if (params.count() != params_.count())
    throw std::invalid_argument("model: checkpoint parameter count mismatch");
  for (size_t i = 0; i < params_.count(); ++i) {
    const grad::Param& have = params.params()[i];
    const grad::Param& want = params_.params()[i];
    if (have.name != want.name || !have.value.same_shape(want.value))
      throw std::invalid_argument("model: checkpoint parameter mismatch at " + want.name);
  }
  params_ = std::move(params);
}

std::vector<PhysNet::Stage> PhysNet::decoder_stages() const {
  std::vector<Stage> stages;
  int ch = cfg_.decoder_base;
  for (int hw = 4; hw < cfg_.resolution; hw *= 2) {
    ch = std::max(ch / 2, 8);
    stages.push_back({ch, 2});
  }
  stages.push_back({ch, 1});  // refine
  stages.push_back({2, 1});   // flow head, zero-initialized
  return stages;
}

void PhysNet::init_params() {
  std::mt19937_64 rng(cfg_.seed);
  auto he = [&rng](std::vector<int> shape, int fan_in) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
  };
  // small random bias keeps relu preactivations off the exact-zero kink
  auto bias = [&rng](int n) { return Tensor::uniform({n}, rng, -0.05, 0.05); };

  int in_ch = cfg_.channels;
  for (size_t i = 0; i < cfg_.stem_widths.size(); ++i) {
    const int out_ch = cfg_.stem_widths[i];
    const std::string base = "enc.stem" + std::to_string(i);
    // k4 s2 p1 halves even extents exactly
    params_.add(base + ".w", he({out_ch, in_ch, 4, 4}, in_ch * 16));
    params_.add(base + ".b", bias(out_ch));
    in_ch = out_ch;
  }
  const int cat_ch = 4 * in_ch;
  params_.add("enc.head.w", he({cfg_.head_conv, cat_ch, 3, 3}, cat_ch * 9));
  params_.add("enc.head.b", bias(cfg_.head_conv));
  const int fh = cfg_.feature_hw();
  const int flat = cfg_.head_conv * fh * fh;
  params_.add("enc.fc1.w", he({flat, cfg_.fc_hidden}, flat));
  params_.add("enc.fc1.b", bias(cfg_.fc_hidden));
  params_.add("enc.fc2.w", he({cfg_.fc_hidden, cfg_.layout.total()}, cfg_.fc_hidden));
  params_.add("enc.fc2.b", bias(cfg_.layout.total()));

  const int seed_feat = cfg_.decoder_base * 16;
  params_.add("dec.fc.w", he({cfg_.layout.total(), seed_feat}, cfg_.layout.total()));
  params_.add("dec.fc.b", bias(seed_feat));
  int ch = cfg_.decoder_base;
  const std::vector<Stage> stages = decoder_stages();
  for (size_t i = 0; i < stages.size(); ++i) {
    const Stage& st = stages[i];
    const int k = st.stride == 2 ? 4 : 3;
    const std::string base = "dec.t" + std::to_string(i);
    if (i + 1 == stages.size()) {
      // exact zeros: training starts at the identity warp
      params_.add(base + ".w", Tensor({ch, st.out_ch, k, k}));
      params_.add(base + ".b", Tensor({st.out_ch}));
    } else {
      params_.add(base + ".w", he({ch, st.out_ch, k, k}, ch * k * k));
      params_.add(base + ".b", bias(st.out_ch));
    }
    ch = st.out_ch;
  }
}

std::vector<int> PhysNet::bind(Graph& g, bool requires_grad) const {
  std::vector<int> leafs;
  leafs.reserve(params_.count());
  for (const grad::Param& p : params_.params()) leafs.push_back(g.leaf(p.value, requires_grad));
  return leafs;
}

int PhysNet::leaf_for(const std::vector<int>& leafs, const std::string& name) const {
  const std::vector<grad::Param>& ps = params_.params();
  for (size_t i = 0; i < ps.size(); ++i)
    if (ps[i].name == name) return leafs.at(i);
  throw grad::UsageError("model: unknown parameter " + name);
}

int PhysNet::encode_node(Graph& g, const std::vector<int>& leafs, int frames, int batch) const {
  const Tensor& x = g.value(frames);
  if (x.rank() != 4 || x.size(0) != batch * 4 || x.size(1) != cfg_.channels ||
      x.size(2) != cfg_.resolution || x.size(3) != cfg_.resolution)
    throw ShapeError("encode: expected [" + std::to_string(batch * 4) + "," +
                     std::to_string(cfg_.channels) + "," + std::to_string(cfg_.resolution) + "," +
                     std::to_string(cfg_.resolution) + "], got " + grad::shape_str(x.shape));
  int h = frames;
  for (size_t i = 0; i < cfg_.stem_widths.size(); ++i) {
    const std::string base = "enc.stem" + std::to_string(i);
    h = g.conv2d(h, leaf_for(leafs, base + ".w"), 2, 1);
    h = g.bias_channels(h, leaf_for(leafs, base + ".b"));
    h = g.relu(h);
  }
  const int fh = cfg_.feature_hw();
  const int cs = cfg_.stem_widths.back();
  // frames are consecutive per sequence, so this reshape is the ordered
  // channel concatenation of the 4 per-frame feature maps
  h = g.reshape(h, {batch, 4 * cs, fh, fh});
  h = g.conv2d(h, leaf_for(leafs, "enc.head.w"), 1, 1);
  h = g.bias_channels(h, leaf_for(leafs, "enc.head.b"));
  h = g.relu(h);
  h = g.reshape(h, {batch, cfg_.head_conv * fh * fh});
  h = g.linear(h, leaf_for(leafs, "enc.fc1.w"), leaf_for(leafs, "enc.fc1.b"));
  h = g.relu(h);
  return g.linear(h, leaf_for(leafs, "enc.fc2.w"), leaf_for(leafs, "enc.fc2.b"));
}

std::pair<int, int> PhysNet::decode_node(Graph& g, const std::vector<int>& leafs, int code,
                                         int frame4) const {
  const Tensor& z = g.value(code);
  if (z.rank() != 2 || z.size(1) != cfg_.layout.total())
    throw ShapeError("decode: code must be [B," + std::to_string(cfg_.layout.total()) + "], got " +
                     grad::shape_str(z.shape));
  const int batch = z.size(0);
  int h = g.linear(code, leaf_for(leafs, "dec.fc.w"), leaf_for(leafs, "dec.fc.b"));
  h = g.relu(h);
  h = g.reshape(h, {batch, cfg_.decoder_base, 4, 4});
  const std::vector<Stage> stages = decoder_stages();
  for (size_t i = 0; i < stages.size(); ++i) {
    const std::string base = "dec.t" + std::to_string(i);
    h = g.conv_transpose2d(h, leaf_for(leafs, base + ".w"), stages[i].stride, 1);
    h = g.bias_channels(h, leaf_for(leafs, base + ".b"));
    if (i + 1 < stages.size()) h = g.relu(h);
  }
  const int flow = h;
  const int pred = g.bilinear_sample(frame4, flow);
  return {flow, pred};
}

grad::Tensor PhysNet::encode_batch(const Tensor& frames, int batch) const {
  Graph g;
  const std::vector<int> leafs = bind(g, false);
  const int x = g.leaf(frames, false);
  const int code = encode_node(g, leafs, x, batch);
  return g.value(code);
}

std::pair<Tensor, Tensor> PhysNet::decode_batch(const Tensor& codes, const Tensor& frame4s) const {
  Graph g;
  const std::vector<int> leafs = bind(g, false);
  const int z = g.leaf(codes, false);
  const int f4 = g.leaf(frame4s, false);
  const auto [flow, pred] = decode_node(g, leafs, z, f4);
  return {g.value(flow), g.value(pred)};
}

grad::Tensor PhysNet::codes_for(const std::vector<const sim::Sequence*>& seqs) const {
  std::vector<const sim::Frame*> frames;
  frames.reserve(seqs.size() * 4);
  for (const sim::Sequence* s : seqs)
    for (int f = 0; f < 4; ++f) frames.push_back(&s->frames.at(static_cast<size_t>(f)));
  return encode_batch(frames_to_tensor(frames), static_cast<int>(seqs.size()));
}

grad::Tensor PhysNet::predict(const std::vector<const sim::Sequence*>& seqs) const {
  const Tensor codes = codes_for(seqs);
  std::vector<const sim::Frame*> f4;
  f4.reserve(seqs.size());
  for (const sim::Sequence* s : seqs) f4.push_back(&s->frames.at(3));
  return decode_batch(codes, frames_to_tensor(f4)).second;
}

void PhysNet::save(const std::string& path, uint64_t step) const {
  grad::Checkpoint ck;
  ck.step = step;
  ck.config_json = model_config_to_json(cfg_);
  for (const grad::Param& p : params_.params()) {
    grad::Param& q = ck.params.add(p.name, p.value);
    q.m = p.m;
    q.s = p.s;
  }
  ck.params.step_count = params_.step_count;
  save_checkpoint(path, ck);
}

PhysNet PhysNet::load(const std::string& path) {
  grad::Checkpoint ck = grad::load_checkpoint(path);
  const ModelConfig cfg = model_config_from_json(ck.config_json);
  PhysNet net(cfg, std::move(ck.params));
  return net;
}

}  // namespace iip::net
