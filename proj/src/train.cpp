#include "iip/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "iip/binio.hpp"

namespace iip::train {

using grad::Graph;
using grad::Tensor;

void update_lambda(LambdaState& state, double grad_norm_mle, double grad_norm_ave, int step) {
  if (!state.ema_ready) {
    state.ema_mle = grad_norm_mle;
    state.ema_ave = grad_norm_ave;
    state.ema_ready = true;
  } else {
    state.ema_mle = state.decay * state.ema_mle + (1.0 - state.decay) * grad_norm_mle;
    state.ema_ave = state.decay * state.ema_ave + (1.0 - state.decay) * grad_norm_ave;
  }
  if (step <= state.warmup_steps) return;
  if (state.max_updates >= 0 && state.updates_done >= state.max_updates) return;
  if (state.update_interval > 0 && step % state.update_interval == 0) {
    const double l = state.balance_ratio * state.ema_mle / (state.ema_ave + 1e-12);
    state.lambda = std::clamp(l, 1e-12, 1e3);
    ++state.updates_done;
  }
}

std::vector<StageSpec> staggered_schedule(const TrainerConfig& cfg) {
  if (cfg.order.size() != 3) throw std::invalid_argument("curriculum needs all three properties");
  if (cfg.stage_steps.size() != 3) throw std::invalid_argument("curriculum needs 3 stage budgets");
  std::vector<StageSpec> stages(3);
  stages[0].active = {cfg.order[0]};
  stages[0].minibatches_per_step = 3;
  stages[1].active = {cfg.order[0], cfg.order[1]};
  stages[1].minibatches_per_step = 2;
  stages[2].active = {cfg.order[0], cfg.order[1], cfg.order[2]};
  stages[2].minibatches_per_step = 3;
  for (int i = 0; i < 3; ++i) stages[static_cast<size_t>(i)].steps = cfg.stage_steps[static_cast<size_t>(i)];
  return stages;
}

int loss_mle_node(Graph& g, int predictions, int targets) { return g.l1_loss(predictions, targets); }

int loss_ave_node(Graph& g, int codes, const net::CodeLayout& layout, Property p) {
  const Tensor& z = g.value(codes);
  if (z.rank() != 2 || z.size(1) != layout.total())
    throw grad::ShapeError("loss_ave: codes must be [K," + std::to_string(layout.total()) +
                           "], got " + grad::shape_str(z.shape));
  const int k = z.size(0);
  const int off = layout.block_offset(p);
  const int len = layout.block_size(p);
  const int total = layout.total();
  int phibar;
  if (off == 0) phibar = g.slice(codes, 1, len, total);
  else if (off + len == total) phibar = g.slice(codes, 1, 0, off);
  else
    phibar = g.concat(1, {g.slice(codes, 1, 0, off), g.slice(codes, 1, off + len, total)});
  const int mean = g.mean_axis0(phibar);
  const int diff = g.sub(phibar, g.broadcast_rows(mean, k));
  return g.sum_sq(diff);
}

std::string metrics_csv(const std::vector<StepMetrics>& rows) {
  std::string out = "step,stage,L_mle,L_ave,lambda,lr,wall_ms\n";
  char buf[256];
  for (const StepMetrics& m : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.17g,%.17g,%.17g,%.17g,%.6g\n",
                  static_cast<long long>(m.step), m.stage, m.l_mle, m.l_ave, m.lambda, m.lr,
                  m.wall_ms);
    out += buf;
  }
  return out;
}

namespace {

struct BatchTensors {
  Tensor inputs;   // [20, C, H, W]
  Tensor frame4s;  // [5, C, H, W]
  Tensor targets;  // [5, C, H, W]
};

BatchTensors tensors_for(const data::MiniBatch& mb) {
  std::vector<const sim::Frame*> in, f4, tg;
  for (const sim::Sequence& s : mb.sequences) {
    for (int f = 0; f < 4; ++f) in.push_back(&s.frames.at(static_cast<size_t>(f)));
    f4.push_back(&s.frames.at(3));
    tg.push_back(&s.frames.at(4));
  }
  return {net::frames_to_tensor(in), net::frames_to_tensor(f4), net::frames_to_tensor(tg)};
}

double validation_l_mle(const net::PhysNet& model, data::DatasetReader& reader, int cap) {
  std::vector<const sim::Sequence*> seqs;
  std::vector<int64_t> ids;
  for (const data::SequenceRecord& r : reader.manifest().records)
    if (r.split == data::Split::param_test) {
      ids.push_back(r.id);
      if (static_cast<int>(ids.size()) >= cap) break;
    }
  if (ids.empty()) return -1.0;
  for (int64_t id : ids) seqs.push_back(&reader.sequence(id));
  const Tensor preds = model.predict(seqs);
  double total = 0.0;
  std::vector<const sim::Frame*> gts;
  for (const sim::Sequence* s : seqs) gts.push_back(&s->frames.at(4));
  const Tensor gt = net::frames_to_tensor(gts);
  for (size_t i = 0; i < preds.v.size(); ++i) total += std::abs(preds.v[i] - gt.v[i]);
  return total / static_cast<double>(seqs.size());
}

double grad_l2_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.v) s += x * x;
  return std::sqrt(s);
}

std::vector<Tensor> collect_leaf_grads(Graph& g, const std::vector<int>& leafs) {
  std::vector<Tensor> out;
  out.reserve(leafs.size());
  for (int id : leafs) {
    if (g.requires_grad(id)) {
      try {
        out.push_back(g.gradient(id));
        continue;
      } catch (const grad::UsageError&) {
        // no gradient flowed to this leaf in this pass
      }
    }
    out.push_back(Tensor(g.value(id).shape));
  }
  return out;
}

}  // namespace

TrainResult train(net::PhysNet& model, data::DatasetReader& reader, const TrainerConfig& cfg,
                  const std::string& out_dir) {
  const std::vector<StageSpec> stages = staggered_schedule(cfg);
  std::mt19937_64 rng(cfg.seed);
  LambdaState lam;
  lam.lambda = cfg.fixed_lambda.value_or(cfg.lambda_init);
  lam.update_interval = cfg.lambda_interval;
  lam.decay = cfg.ema_decay;
  lam.balance_ratio = cfg.lambda_ratio;
  lam.warmup_steps = cfg.lambda_warmup;
  lam.max_updates = cfg.lambda_anchor_updates;
  const bool dynamic_lambda = !cfg.fixed_lambda.has_value();

  TrainResult result;
  int64_t global_step = 0;
  const bool write = !out_dir.empty();
  if (write) std::filesystem::create_directories(out_dir);

  auto save_model = [&](const std::string& name) {
    if (write) model.save(out_dir + "/" + name, static_cast<uint64_t>(global_step));
  };
  auto flush_metrics = [&]() {
    if (write) io::write_file(out_dir + "/metrics.csv", metrics_csv(result.metrics));
  };

  for (size_t si = 0; si < stages.size(); ++si) {
    const StageSpec& stage = stages[si];
    double best_val = std::numeric_limits<double>::infinity();
    int stale = 0;

    for (int s = 0; s < stage.steps; ++s) {
      const auto t0 = std::chrono::steady_clock::now();

      // property assignment for this step's mini-batches
      std::vector<Property> picks;
      if (stage.active.size() == 1)
        picks.assign(static_cast<size_t>(stage.minibatches_per_step), stage.active[0]);
      else
        picks = stage.active;  // one mini-batch per active property

      std::vector<data::MiniBatch> batches;
      batches.reserve(picks.size());
      for (Property p : picks) batches.push_back(reader.sample_minibatch(p, rng));

      Graph g;
      const std::vector<int> leafs = model.bind(g, true);
      int total_mle = -1, total_ave = -1;
      int seq_count = 0;
      for (const data::MiniBatch& mb : batches) {
        const BatchTensors bt = tensors_for(mb);
        const int x = g.leaf(bt.inputs, false);
        const int f4 = g.leaf(bt.frame4s, false);
        const int tgt = g.leaf(bt.targets, false);
        const int codes = model.encode_node(g, leafs, x, 5);
        const auto [flow, pred] = model.decode_node(g, leafs, codes, f4);
        const int mle = loss_mle_node(g, pred, tgt);
        const int ave = loss_ave_node(g, codes, model.config().layout, mb.property);
        total_mle = total_mle < 0 ? mle : g.add(total_mle, mle);
        total_ave = total_ave < 0 ? ave : g.add(total_ave, ave);
        seq_count += static_cast<int>(mb.sequences.size());
      }

      const double mle_value = g.value(total_mle).v[0];
      const double ave_value = g.value(total_ave).v[0];
      if (!std::isfinite(mle_value) || !std::isfinite(ave_value)) {
        save_model("final.ckpt");
        flush_metrics();
        throw TrainDiverged("loss became non-finite at step " + std::to_string(global_step));
      }

      model.params().zero_grads();
      const bool measure = dynamic_lambda && lam.update_interval > 0 &&
                           (static_cast<int>(global_step) + 1) % lam.update_interval == 0 &&
                           (lam.max_updates < 0 || lam.updates_done < lam.max_updates);
      if (measure) {
        // separate passes so the controller sees both gradient magnitudes
        g.backward(total_mle);
        const std::vector<Tensor> grads_mle = collect_leaf_grads(g, leafs);
        g.reset_grads();
        g.backward(total_ave);
        const std::vector<Tensor> grads_ave = collect_leaf_grads(g, leafs);
        model.params().accumulate_grads(grads_mle, 1.0);
        model.params().accumulate_grads(grads_ave, lam.lambda);
        update_lambda(lam, grad_l2_norm(grads_mle), grad_l2_norm(grads_ave),
                      static_cast<int>(global_step) + 1);
      } else {
        const int total =
            lam.lambda != 0.0 ? g.add(total_mle, g.scale(total_ave, lam.lambda)) : total_mle;
        g.backward(total);
        model.params().accumulate_grads(collect_leaf_grads(g, leafs), 1.0);
      }

      model.params().adam_step(cfg.adam);
      ++global_step;

      StepMetrics m;
      m.step = global_step;
      m.stage = static_cast<int>(si) + 1;
      m.l_mle = mle_value / seq_count;
      m.l_ave = ave_value / static_cast<double>(batches.size());
      m.lambda = lam.lambda;
      m.lr = cfg.adam.lr;
      if (cfg.measure_wall) {
        const auto t1 = std::chrono::steady_clock::now();
        m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      }
      result.metrics.push_back(m);

      if (cfg.eval_interval > 0 && global_step % cfg.eval_interval == 0) {
        const double val = validation_l_mle(model, reader, cfg.validation_cap);
        if (val >= 0.0) {
          if (val < best_val * 0.999) {
            best_val = val;
            stale = 0;
          } else if (++stale >= cfg.patience) {
            break;  // plateau: end the stage early
          }
        }
      }
    }

    result.stage_end_steps.push_back(global_step);
    save_model("stage" + std::to_string(si + 1) + ".ckpt");
  }

  result.final_step = static_cast<uint64_t>(global_step);
  save_model("final.ckpt");
  flush_metrics();
  return result;
}

}  // namespace iip::train
