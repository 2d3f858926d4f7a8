#include "iip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace iip::eval {

using grad::Graph;
using grad::Tensor;

const char* metric_name(Metric m) { return m == Metric::l1_sum ? "l1_sum" : "sse"; }

double pixel_error(const sim::Frame& pred, const sim::Frame& gt, Metric metric) {
  if (pred.height != gt.height || pred.width != gt.width || pred.channels != gt.channels)
    throw grad::ShapeError("pixel_error: frame shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < pred.pixels.size(); ++i) {
    const double d = 255.0 * (static_cast<double>(pred.pixels[i]) - gt.pixels[i]);
    s += metric == Metric::l1_sum ? std::abs(d) : d * d;
  }
  return s;
}

// ------------------------------------------------------------- assignments

std::vector<int> top_variance_dims(const std::vector<Tensor>& batch_codes, int k) {
  if (batch_codes.empty()) throw data::DataError("top_variance_dims: no mini-batches");
  const int d = batch_codes.front().size(1);
  std::vector<double> avg(static_cast<size_t>(d), 0.0);
  for (const Tensor& codes : batch_codes) {
    const int n = codes.size(0);
    for (int j = 0; j < d; ++j) {
      double mean = 0.0;
      for (int r = 0; r < n; ++r) mean += codes.v[static_cast<size_t>(r) * d + j];
      mean /= n;
      double var = 0.0;
      for (int r = 0; r < n; ++r) {
        const double x = codes.v[static_cast<size_t>(r) * d + j] - mean;
        var += x * x;
      }
      avg[static_cast<size_t>(j)] += var / n;
    }
  }
  std::vector<int> idx(static_cast<size_t>(d));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (avg[static_cast<size_t>(a)] != avg[static_cast<size_t>(b)])
      return avg[static_cast<size_t>(a)] > avg[static_cast<size_t>(b)];
    return a < b;
  });
  idx.resize(static_cast<size_t>(std::min(k, d)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

Tensor codes_for_batch(const net::PhysNet& model, const data::MiniBatch& mb) {
  std::vector<const sim::Sequence*> seqs;
  for (const sim::Sequence& s : mb.sequences) seqs.push_back(&s);
  return model.codes_for(seqs);
}

Tensor code_row(const Tensor& codes, int r) {
  const int d = codes.size(1);
  Tensor out({d});
  for (int j = 0; j < d; ++j) out.v[static_cast<size_t>(j)] = codes.v[static_cast<size_t>(r) * d + j];
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  const int d = static_cast<int>(rows.front().numel());
  Tensor out({static_cast<int>(rows.size()), d});
  for (size_t r = 0; r < rows.size(); ++r)
    for (int j = 0; j < d; ++j) out.v[r * static_cast<size_t>(d) + j] = rows[r].v[static_cast<size_t>(j)];
  return out;
}

struct CellAccum {
  std::map<std::pair<std::string, std::string>, std::pair<double, int64_t>> acc;

  void add(const std::string& method, const std::string& condition, double v) {
    auto& e = acc[{method, condition}];
    e.first += v;
    e.second += 1;
  }
  void flush(EvalReport& r) const {
    for (const auto& [key, e] : acc)
      r.cells.push_back({key.first, key.second, e.first / e.second, e.second});
  }
};

}  // namespace

DimAssignment baseline_assign_dims(const net::PhysNet& model, data::DatasetReader& reader) {
  DimAssignment asg;
  asg.k = model.config().layout.d_mass;
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    const std::vector<data::BatchContext>& ctxs = reader.contexts(p, data::Split::train);
    if (ctxs.empty())
      throw data::DataError(std::string("no complete mini-batches for property ") +
                            sim::property_name(p));
    std::vector<Tensor> code_mats;
    for (const data::BatchContext& ctx : ctxs)
      code_mats.push_back(codes_for_batch(model, reader.load_batch(p, ctx)));
    asg.dims[static_cast<size_t>(p)] = top_variance_dims(code_mats, asg.k);
  }
  return asg;
}

ModelBlocks disentangled_blocks(const net::PhysNet& model, std::string method) {
  ModelBlocks mb;
  mb.model = &model;
  mb.method = std::move(method);
  const net::CodeLayout& l = model.config().layout;
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    std::vector<int>& dims = mb.prop_dims[static_cast<size_t>(p)];
    for (int i = 0; i < l.block_size(p); ++i) dims.push_back(l.block_offset(p) + i);
  }
  return mb;
}

ModelBlocks assigned_blocks(const net::PhysNet& model, const DimAssignment& asg,
                            std::string method) {
  ModelBlocks mb;
  mb.model = &model;
  mb.method = std::move(method);
  mb.prop_dims = asg.dims;
  return mb;
}

// --------------------------------------------------------- code surgeries

Tensor gather_dims(const Tensor& code, const std::vector<int>& dims) {
  Tensor out({static_cast<int>(dims.size())});
  for (size_t i = 0; i < dims.size(); ++i) out.v[i] = code.v[static_cast<size_t>(dims[i])];
  return out;
}

Tensor with_dims(const Tensor& code, const std::vector<int>& dims, const Tensor& values) {
  if (static_cast<int>(dims.size()) != values.numel())
    throw grad::ShapeError("with_dims: value count does not match the dim set");
  Tensor out = code;
  for (size_t i = 0; i < dims.size(); ++i) out.v[static_cast<size_t>(dims[i])] = values.v[i];
  return out;
}

Tensor interpolate_code(const Tensor& z_low, const Tensor& z_high, int target_scale,
                        const std::vector<int>& dims) {
  if (!z_low.same_shape(z_high)) throw grad::ShapeError("interpolate_code: layout mismatch");
  if (target_scale < 1 || target_scale > 5)
    throw std::out_of_range("interpolate_code: target scale must be in 1..5");
  const double t = (target_scale - 1) / 4.0;
  Tensor out = z_low;
  for (int d : dims)
    out.v[static_cast<size_t>(d)] =
        (1.0 - t) * z_low.v[static_cast<size_t>(d)] + t * z_high.v[static_cast<size_t>(d)];
  return out;
}

Tensor switch_property(const Tensor& z_a, const Tensor& z_b, const std::vector<int>& dims) {
  if (!z_a.same_shape(z_b)) throw grad::ShapeError("switch_property: layout mismatch");
  Tensor out = z_a;
  for (int d : dims) out.v[static_cast<size_t>(d)] = z_b.v[static_cast<size_t>(d)];
  return out;
}

// ----------------------------------------------------------------- reports

double EvalReport::get(const std::string& method, const std::string& condition) const {
  for (const EvalCell& c : cells)
    if (c.method == method && c.condition == condition) return c.value;
  throw std::out_of_range("report " + name + " has no cell (" + method + ", " + condition + ")");
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "method,condition,metric,value,count\n";
  for (const EvalCell& c : r.cells)
    os << c.method << "," << c.condition << "," << r.metric << "," << c.value << "," << c.count
       << "\n";
  return os.str();
}

std::string report_wide_csv(const EvalReport& r) {
  std::vector<std::string> methods, conditions;
  for (const EvalCell& c : r.cells) {
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end())
      methods.push_back(c.method);
    if (std::find(conditions.begin(), conditions.end(), c.condition) == conditions.end())
      conditions.push_back(c.condition);
  }
  std::ostringstream os;
  os << "method";
  for (const std::string& c : conditions) os << "," << c;
  os << "\n";
  for (const std::string& m : methods) {
    os << m;
    for (const std::string& c : conditions) {
      os << ",";
      for (const EvalCell& cell : r.cells)
        if (cell.method == m && cell.condition == c) {
          os << cell.value;
          break;
        }
    }
    os << "\n";
  }
  return os.str();
}

// -------------------------------------------------------------- protocols

namespace {

std::vector<data::BatchContext> interp_contexts(data::DatasetReader& reader, Property p,
                                                data::Split split, int cap) {
  std::vector<data::BatchContext> out;
  if (split == data::Split::shape_test) {
    out = reader.contexts(p, data::Split::shape_test);
  } else {
    // contexts whose middle member is the held-out parameter cell
    for (const data::BatchContext& ctx : reader.contexts_all(p)) {
      const data::SequenceRecord& mid =
          reader.manifest().records.at(static_cast<size_t>(ctx.member_ids[2]));
      if (mid.split == data::Split::param_test) out.push_back(ctx);
    }
  }
  if (cap > 0 && static_cast<int>(out.size()) > cap) out.resize(static_cast<size_t>(cap));
  return out;
}

}  // namespace

EvalReport eval_prediction(const std::vector<ModelBlocks>& models, data::DatasetReader& reader,
                           data::Split split, Metric metric, int max_sequences) {
  EvalReport rep;
  rep.name = "prediction";
  rep.metric = metric_name(metric);
  CellAccum acc;
  std::vector<int64_t> ids;
  for (const data::SequenceRecord& r : reader.manifest().records)
    if (r.split == split) {
      ids.push_back(r.id);
      if (max_sequences > 0 && static_cast<int>(ids.size()) >= max_sequences) break;
    }
  for (const ModelBlocks& mb : models) {
    for (size_t i0 = 0; i0 < ids.size(); i0 += 8) {
      std::vector<const sim::Sequence*> seqs;
      for (size_t i = i0; i < std::min(i0 + 8, ids.size()); ++i)
        seqs.push_back(&reader.sequence(ids[i]));
      const Tensor preds = mb.model->predict(seqs);
      for (size_t i = 0; i < seqs.size(); ++i)
        acc.add(mb.method, "prediction",
                pixel_error(net::tensor_to_frame(preds, static_cast<int>(i)), seqs[i]->frames.at(4),
                            metric));
    }
  }
  acc.flush(rep);
  return rep;
}

EvalReport eval_interpolation(const std::vector<ModelBlocks>& models, data::DatasetReader& reader,
                              data::Split split, Metric metric, int max_contexts) {
  EvalReport rep;
  rep.name = "interpolation";
  rep.metric = metric_name(metric);
  CellAccum acc;
  const std::vector<int> scales =
      split == data::Split::shape_test ? std::vector<int>{2, 3, 4, 5} : std::vector<int>{3};
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    const std::vector<data::BatchContext> ctxs = interp_contexts(reader, p, split, max_contexts);
    for (const data::BatchContext& ctx : ctxs) {
      const data::MiniBatch batch = reader.load_batch(p, ctx);
      for (const ModelBlocks& mb : models) {
        const Tensor codes = codes_for_batch(*mb.model, batch);
        const Tensor z1 = code_row(codes, 0);
        const Tensor z5 = code_row(codes, 4);
        std::vector<Tensor> zhat;
        std::vector<const sim::Frame*> f4s;
        for (int i : scales) {
          zhat.push_back(interpolate_code(z1, z5, i, mb.prop_dims[static_cast<size_t>(p)]));
          f4s.push_back(&batch.sequences.at(static_cast<size_t>(i - 1)).frames.at(3));
        }
        const Tensor preds =
            mb.model->decode_batch(stack_rows(zhat), net::frames_to_tensor(f4s)).second;
        for (size_t i = 0; i < scales.size(); ++i) {
          const sim::Frame& gt = batch.sequences.at(static_cast<size_t>(scales[i] - 1)).frames.at(4);
          acc.add(mb.method, "scale_" + std::to_string(scales[i]),
                  pixel_error(net::tensor_to_frame(preds, static_cast<int>(i)), gt, metric));
        }
      }
    }
  }
  acc.flush(rep);
  return rep;
}

// -------------------------------------------------------------- ratio nets

grad::ParamSet& RatioNets::net(Property p, int factor) {
  return nets.at({static_cast<int>(p), factor});
}
const grad::ParamSet& RatioNets::net(Property p, int factor) const {
  return nets.at({static_cast<int>(p), factor});
}

grad::Tensor RatioNets::apply(Property p, int factor, const Tensor& block) const {
  const grad::ParamSet& ps = net(p, factor);
  Graph g;
  const int x = g.leaf(Tensor({1, static_cast<int>(block.numel())}, block.v), false);
  int h = g.linear(x, g.leaf(ps.get("w1").value), g.leaf(ps.get("b1").value));
  h = g.relu(h);
  h = g.linear(h, g.leaf(ps.get("w2").value), g.leaf(ps.get("b2").value));
  Tensor out({static_cast<int>(block.numel())});
  out.v = g.value(h).v;
  return out;
}

namespace {

const std::vector<std::pair<int, int>>& ratio_pairs(int factor) {
  static const std::vector<std::pair<int, int>> twos = {{1, 2}, {2, 4}};
  static const std::vector<std::pair<int, int>> threes = {{1, 3}};
  return factor == 2 ? twos : threes;
}

grad::ParamSet make_mlp(int in, int hidden, int out, std::mt19937_64& rng) {
  grad::ParamSet ps;
  ps.add("w1", Tensor::randn({in, hidden}, rng, std::sqrt(2.0 / in)));
  ps.add("b1", Tensor({hidden}));
  ps.add("w2", Tensor::randn({hidden, out}, rng, std::sqrt(2.0 / hidden)));
  ps.add("b2", Tensor({out}));
  return ps;
}

void fit_mlp(grad::ParamSet& ps, const Tensor& x, const Tensor& y, int steps, double lr) {
  grad::AdamConfig ad;
  ad.lr = lr;
  for (int s = 0; s < steps; ++s) {
    Graph g;
    std::vector<int> leafs;
    for (const grad::Param& p : ps.params()) leafs.push_back(g.leaf(p.value, true));
    const int xin = g.leaf(x, false);
    int h = g.linear(xin, leafs[0], leafs[1]);
    h = g.relu(h);
    h = g.linear(h, leafs[2], leafs[3]);
    const int loss = g.mse_loss(h, g.leaf(y, false));
    g.backward(loss);
    std::vector<Tensor> grads;
    for (size_t i = 0; i < leafs.size(); ++i) {
      try {
        grads.push_back(g.gradient(leafs[i]));
      } catch (const grad::UsageError&) {
        grads.push_back(Tensor(ps.params()[i].value.shape));
      }
    }
    ps.zero_grads();
    ps.accumulate_grads(grads, 1.0);
    ps.adam_step(ad);
  }
}

}  // namespace

RatioNets train_ratio_nets(const ModelBlocks& mb, data::DatasetReader& reader,
                           const RatioConfig& cfg) {
  RatioNets out;
  std::mt19937_64 rng(cfg.seed);
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    std::vector<data::BatchContext> ctxs = reader.contexts(p, data::Split::train);
    if (cfg.max_contexts > 0 && static_cast<int>(ctxs.size()) > cfg.max_contexts)
      ctxs.resize(static_cast<size_t>(cfg.max_contexts));
    if (ctxs.empty())
      throw data::DataError(std::string("no train mini-batches for ratio nets on ") +
                            sim::property_name(p));
    const std::vector<int>& dims = mb.prop_dims[static_cast<size_t>(p)];
    std::vector<Tensor> codes;
    for (const data::BatchContext& ctx : ctxs)
      codes.push_back(codes_for_batch(*mb.model, reader.load_batch(p, ctx)));
    for (int factor : {2, 3}) {
      std::vector<Tensor> xs, ys;
      for (const Tensor& mat : codes)
        for (const auto& [j, fj] : ratio_pairs(factor)) {
          xs.push_back(gather_dims(code_row(mat, j - 1), dims));
          ys.push_back(gather_dims(code_row(mat, fj - 1), dims));
        }
      grad::ParamSet ps = make_mlp(static_cast<int>(dims.size()), cfg.hidden,
                                   static_cast<int>(dims.size()), rng);
      fit_mlp(ps, stack_rows(xs), stack_rows(ys), cfg.steps, cfg.lr);
      out.nets.emplace(std::make_pair(static_cast<int>(p), factor), std::move(ps));
    }
  }
  return out;
}

EvalReport eval_ratio(const ModelBlocks& mb, const RatioNets& nets, data::DatasetReader& reader,
                      data::Split split, Metric metric, int max_contexts) {
  EvalReport rep;
  rep.name = "ratio";
  rep.metric = metric_name(metric);
  CellAccum acc;
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    std::vector<data::BatchContext> ctxs = interp_contexts(reader, p, split, max_contexts);
    for (const data::BatchContext& ctx : ctxs) {
      const data::MiniBatch batch = reader.load_batch(p, ctx);
      const Tensor codes = codes_for_batch(*mb.model, batch);
      const std::vector<int>& dims = mb.prop_dims[static_cast<size_t>(p)];
      for (int factor : {2, 3}) {
        for (const auto& [j, fj] : ratio_pairs(factor)) {
          if (split == data::Split::param_test && !(factor == 3 && j == 1))
            continue;  // only the x3 projection lands on the held-out cell
          const Tensor zj = code_row(codes, j - 1);
          const Tensor mapped = nets.apply(p, factor, gather_dims(zj, dims));
          const Tensor zhat = with_dims(zj, dims, mapped);
          std::vector<const sim::Frame*> f4{&batch.sequences.at(static_cast<size_t>(j - 1)).frames.at(3)};
          const Tensor pred =
              mb.model->decode_batch(stack_rows({zhat}), net::frames_to_tensor(f4)).second;
          const sim::Frame predf = net::tensor_to_frame(pred, 0);
          const std::string cond = "ratio_" + std::to_string(factor);
          acc.add(mb.method, cond,
                  pixel_error(predf, batch.sequences.at(static_cast<size_t>(fj - 1)).frames.at(4),
                              metric));
          acc.add(mb.method + "_vs_unscaled", cond,
                  pixel_error(predf, batch.sequences.at(static_cast<size_t>(j - 1)).frames.at(4),
                              metric));
        }
      }
    }
  }
  acc.flush(rep);
  return rep;
}

// --------------------------------------------------------------- switching

EvalReport eval_switch(const ModelBlocks& mb, data::DatasetReader& reader, data::Split split,
                       Metric metric, int max_pairs) {
  EvalReport rep;
  rep.name = "switch";
  rep.metric = metric_name(metric);
  CellAccum acc;
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    const std::vector<data::BatchContext>& ctxs = reader.contexts(p, split);
    // cross-pair partners with the same scale of p
    std::vector<std::pair<const data::BatchContext*, const data::BatchContext*>> partners;
    for (size_t i = 0; i < ctxs.size(); ++i)
      for (size_t j = i + 1; j < ctxs.size(); ++j)
        if (ctxs[i].pair_index != ctxs[j].pair_index) {
          partners.emplace_back(&ctxs[i], &ctxs[j]);
          break;
        }
    if (max_pairs > 0 && static_cast<int>(partners.size()) > max_pairs)
      partners.resize(static_cast<size_t>(max_pairs));
    for (const auto& [ca, cb] : partners) {
      const data::MiniBatch ba = reader.load_batch(p, *ca);
      const data::MiniBatch bb = reader.load_batch(p, *cb);
      const Tensor codes_a = codes_for_batch(*mb.model, ba);
      const Tensor codes_b = codes_for_batch(*mb.model, bb);
      std::vector<Tensor> rows;
      std::vector<const sim::Frame*> f4s;
      for (int s = 0; s < 5; ++s) {
        const Tensor za = code_row(codes_a, s);
        rows.push_back(switch_property(za, code_row(codes_b, s), mb.prop_dims[static_cast<size_t>(p)]));
        rows.push_back(za);
        const sim::Frame* f4 = &ba.sequences.at(static_cast<size_t>(s)).frames.at(3);
        f4s.push_back(f4);
        f4s.push_back(f4);
      }
      const Tensor preds = mb.model->decode_batch(stack_rows(rows), net::frames_to_tensor(f4s)).second;
      for (int s = 0; s < 5; ++s) {
        const sim::Frame& gt = ba.sequences.at(static_cast<size_t>(s)).frames.at(4);
        acc.add(mb.method, "switched", pixel_error(net::tensor_to_frame(preds, 2 * s), gt, metric));
        acc.add(mb.method, "unswitched",
                pixel_error(net::tensor_to_frame(preds, 2 * s + 1), gt, metric));
      }
    }
  }
  acc.flush(rep);
  return rep;
}

// ----------------------------------------------------------- flow baselines

sim::FlowField linear_flow_extrapolation(const sim::Sequence& seq) {
  if (seq.gt_flows.size() < 3)
    throw data::DataError("linear flow extrapolation needs the 3 input flows");
  const sim::FlowField& g0 = seq.gt_flows[0];
  const sim::FlowField& g1 = seq.gt_flows[1];
  const sim::FlowField& g2 = seq.gt_flows[2];
  sim::FlowField out;
  out.height = g0.height;
  out.width = g0.width;
  out.d.resize(g0.d.size());
  for (size_t i = 0; i < out.d.size(); ++i) {
    // least-squares line through t = 0,1,2 evaluated at t = 3
    const double mean = (static_cast<double>(g0.d[i]) + g1.d[i] + g2.d[i]) / 3.0;
    const double slope = (static_cast<double>(g2.d[i]) - g0.d[i]) / 2.0;
    out.d[i] = static_cast<float>(mean + 2.0 * slope);
  }
  return out;
}

namespace {

sim::Frame warp_frame(const sim::Frame& src, const sim::FlowField& flow) {
  Graph g;
  const int s = g.leaf(net::frames_to_tensor({&src}), false);
  const int f = g.leaf(net::flow_to_tensor({&flow}), false);
  return net::tensor_to_frame(g.value(g.bilinear_sample(s, f)), 0);
}

}  // namespace

EvalReport flow_baselines(data::DatasetReader& reader, const net::ModelConfig& arch,
                          const FlowBaselineConfig& cfg, data::Split eval_split, Metric metric) {
  EvalReport rep;
  rep.name = "flow_baselines";
  rep.metric = metric_name(metric);
  CellAccum acc;

  std::vector<int64_t> train_ids, eval_ids;
  for (const data::SequenceRecord& r : reader.manifest().records) {
    if (r.split == data::Split::train) train_ids.push_back(r.id);
    if (r.split == eval_split) eval_ids.push_back(r.id);
  }
  if (train_ids.empty() || eval_ids.empty())
    throw data::DataError("flow baselines need train and eval sequences");
  if (cfg.max_eval > 0 && static_cast<int>(eval_ids.size()) > cfg.max_eval)
    eval_ids.resize(static_cast<size_t>(cfg.max_eval));

  // (a) the same architecture, supervised by the ground-truth 4->5 flow
  net::ModelConfig fc = arch;
  fc.seed = cfg.seed;
  net::PhysNet flow_net(fc);
  std::mt19937_64 rng(cfg.seed);
  grad::AdamConfig ad;
  ad.lr = cfg.lr;
  std::uniform_int_distribution<size_t> pick(0, train_ids.size() - 1);
  for (int s = 0; s < cfg.train_steps; ++s) {
    std::vector<const sim::Sequence*> seqs;
    for (int b = 0; b < cfg.batch; ++b) seqs.push_back(&reader.sequence(train_ids[pick(rng)]));
    std::vector<const sim::Frame*> in;
    std::vector<const sim::FlowField*> gtf;
    for (const sim::Sequence* q : seqs) {
      for (int f = 0; f < 4; ++f) in.push_back(&q->frames.at(static_cast<size_t>(f)));
      if (q->gt_flows.size() != 4) throw data::DataError("dataset lacks ground-truth flows");
      gtf.push_back(&q->gt_flows.at(3));
    }
    Graph g;
    const std::vector<int> leafs = flow_net.bind(g, true);
    const int x = g.leaf(net::frames_to_tensor(in), false);
    const int codes = flow_net.encode_node(g, leafs, x, cfg.batch);
    std::vector<const sim::Frame*> f4s;
    for (const sim::Sequence* q : seqs) f4s.push_back(&q->frames.at(3));
    const auto [flow, pred] = flow_net.decode_node(g, leafs, codes, g.leaf(net::frames_to_tensor(f4s), false));
    const int loss = g.mse_loss(flow, g.leaf(net::flow_to_tensor(gtf), false));
    g.backward(loss);
    std::vector<Tensor> grads;
    for (size_t i = 0; i < leafs.size(); ++i) {
      try {
        grads.push_back(g.gradient(leafs[i]));
      } catch (const grad::UsageError&) {
        grads.push_back(Tensor(g.value(leafs[i]).shape));
      }
    }
    flow_net.params().zero_grads();
    flow_net.params().accumulate_grads(grads, 1.0);
    flow_net.params().adam_step(ad);
  }
  for (size_t i0 = 0; i0 < eval_ids.size(); i0 += 8) {
    std::vector<const sim::Sequence*> seqs;
    for (size_t i = i0; i < std::min(i0 + 8, eval_ids.size()); ++i)
      seqs.push_back(&reader.sequence(eval_ids[i]));
    const Tensor preds = flow_net.predict(seqs);
    for (size_t i = 0; i < seqs.size(); ++i)
      acc.add("flow_supervised", "prediction",
              pixel_error(net::tensor_to_frame(preds, static_cast<int>(i)), seqs[i]->frames.at(4),
                          metric));
  }

  // (b) per-pixel linear extrapolation of the three input flows
  for (int64_t id : eval_ids) {
    const sim::Sequence& seq = reader.sequence(id);
    const sim::Frame pred = warp_frame(seq.frames.at(3), linear_flow_extrapolation(seq));
    acc.add("linear_flow", "prediction", pixel_error(pred, seq.frames.at(4), metric));
  }

  acc.flush(rep);
  return rep;
}

// ------------------------------------------------------------------ scores

namespace {
std::vector<double> per_dim_variance(const Tensor& codes) {
  const int k = codes.size(0), d = codes.size(1);
  std::vector<double> var(static_cast<size_t>(d), 0.0);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int r = 0; r < k; ++r) mean += codes.v[static_cast<size_t>(r) * d + j];
    mean /= k;
    for (int r = 0; r < k; ++r) {
      const double x = codes.v[static_cast<size_t>(r) * d + j] - mean;
      var[static_cast<size_t>(j)] += x * x / k;
    }
  }
  return var;
}
}  // namespace

double variance_share(const Tensor& codes, const std::vector<int>& dims) {
  const std::vector<double> var = per_dim_variance(codes);
  const double total = std::accumulate(var.begin(), var.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double block = 0.0;
  for (int d : dims) block += var[static_cast<size_t>(d)];
  return block / total;
}

DisentanglementScore disentanglement_score(const ModelBlocks& mb, data::DatasetReader& reader,
                                           data::Split split, uint64_t null_seed, int null_draws,
                                           int max_contexts) {
  DisentanglementScore out;
  std::mt19937_64 rng(null_seed);
  const int total = mb.model->config().layout.total();
  for (Property p : {Property::mass, Property::speed, Property::friction}) {
    std::vector<data::BatchContext> ctxs = reader.contexts(p, split);
    if (max_contexts > 0 && static_cast<int>(ctxs.size()) > max_contexts)
      ctxs.resize(static_cast<size_t>(max_contexts));
    if (ctxs.empty())
      throw data::DataError(std::string("no complete held-out mini-batches for ") +
                            sim::property_name(p));
    const std::vector<int>& dims = mb.prop_dims[static_cast<size_t>(p)];
    double score_sum = 0.0, null_sum = 0.0;
    for (const data::BatchContext& ctx : ctxs) {
      const Tensor codes = codes_for_batch(*mb.model, reader.load_batch(p, ctx));
      const std::vector<double> var = per_dim_variance(codes);
      const double total_var = std::accumulate(var.begin(), var.end(), 0.0);
      if (total_var <= 0.0) continue;
      double block_var = 0.0;
      for (int d : dims) block_var += var[static_cast<size_t>(d)];
      score_sum += block_var / total_var;

      std::vector<int> idx(static_cast<size_t>(total));
      std::iota(idx.begin(), idx.end(), 0);
      double null_batch = 0.0;
      for (int draw = 0; draw < null_draws; ++draw) {
        for (size_t i = 0; i < dims.size(); ++i) {
          std::uniform_int_distribution<size_t> d(i, idx.size() - 1);
          std::swap(idx[i], idx[d(rng)]);
        }
        double v = 0.0;
        for (size_t i = 0; i < dims.size(); ++i) v += var[static_cast<size_t>(idx[i])];
        null_batch += v / total_var;
      }
      null_sum += null_batch / null_draws;
      ++out.batches;
    }
    const double n = static_cast<double>(ctxs.size());
    out.score[static_cast<size_t>(p)] = score_sum / n;
    out.null_score[static_cast<size_t>(p)] = null_sum / n;
  }
  return out;
}

}  // namespace iip::eval
