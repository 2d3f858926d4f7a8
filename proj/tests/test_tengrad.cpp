#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "iip/binio.hpp"
#include "iip/checkpoint.hpp"
#include "iip/graph.hpp"
#include "iip/optim.hpp"
#include "testutil.hpp"

using iip::grad::AdamConfig;
using iip::grad::Graph;
using iip::grad::ParamSet;
using iip::grad::ShapeError;
using iip::grad::Tensor;
using iip::grad::UsageError;
using testutil::fd_check;

namespace {
std::mt19937_64 rng(42);
}

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
  Graph g;
  const Tensor x = Tensor::randn({2, 3, 5, 5}, rng);
  Tensor k({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) k.v[static_cast<size_t>(i) * 3 + i] = 1.0;
  const int y = g.conv2d(g.leaf(x), g.leaf(k), 1, 0);
  const Tensor& out = g.value(y);
  REQUIRE(out.shape == x.shape);
  for (size_t i = 0; i < x.v.size(); ++i) CHECK(out.v[i] == doctest::Approx(x.v[i]).epsilon(1e-12));
}

TEST_CASE("conv2d all-ones 2x2 kernel sums the input") {
  Graph g;
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  const int y = g.conv2d(g.leaf(x), g.leaf(k), 1, 0);
  REQUIRE(g.value(y).numel() == 1);
  CHECK(g.value(y).v[0] == doctest::Approx(10.0));  // 1+2+3+4
}

TEST_CASE("conv2d rejects channel mismatch") {
  Graph g;
  const int x = g.leaf(Tensor::randn({1, 3, 4, 4}, rng));
  const int k = g.leaf(Tensor::randn({2, 4, 3, 3}, rng));
  CHECK_THROWS_AS(g.conv2d(x, k, 1, 1), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
  const Tensor x = Tensor::randn({2, 2, 5, 5}, rng);
  const Tensor k = Tensor::randn({3, 2, 3, 3}, rng, 0.5);
  const Tensor t = Tensor::randn({2, 3, 3, 3}, rng);
  const double err = fd_check(
      [&](Graph& g, const std::vector<int>& ids) {
        return g.mse_loss(g.conv2d(ids[0], ids[1], 2, 1), g.leaf(t));
      },
      {x, k});
  CHECK(err < 1e-4);
}

TEST_CASE("conv_transpose2d satisfies the adjoint identity") {
  for (int trial = 0; trial < 6; ++trial) {
    const int stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1;
    const int kside = stride == 2 ? 4 : (pad == 1 ? 3 : 2);
    const Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
    const Tensor k = Tensor::randn({3, 2, kside, kside}, rng);
    Graph g;
    const int xg = g.leaf(x), kg = g.leaf(k);
    const int y = g.conv2d(xg, kg, stride, pad);
    const Tensor yr = Tensor::randn(g.value(y).shape, rng);
    const int yt = g.conv_transpose2d(g.leaf(yr), kg, stride, pad);
    // <conv(x,k), y> == <x, conv_T(y,k)>
    double lhs = 0.0, rhs = 0.0;
    for (size_t i = 0; i < yr.v.size(); ++i) lhs += g.value(y).v[i] * yr.v[i];
    for (size_t i = 0; i < x.v.size(); ++i) rhs += x.v[i] * g.value(yt).v[i];
    CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("conv_transpose2d of a 1x1 input with stride 2 reproduces the kernel") {
  Graph g;
  const int x = g.leaf(Tensor::full({1, 1, 1, 1}, 1.0));
  const Tensor k = Tensor::randn({1, 1, 2, 2}, rng);
  const int y = g.conv_transpose2d(x, g.leaf(k), 2, 0);
  REQUIRE(g.value(y).shape == std::vector<int>{1, 1, 2, 2});
  for (size_t i = 0; i < k.v.size(); ++i) CHECK(g.value(y).v[i] == doctest::Approx(k.v[i]));
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
  const Tensor x = Tensor::randn({1, 3, 3, 3}, rng);
  const Tensor k = Tensor::randn({3, 2, 4, 4}, rng, 0.5);
  const Tensor t = Tensor::randn({1, 2, 6, 6}, rng);
  const double err = fd_check(
      [&](Graph& g, const std::vector<int>& ids) {
        return g.mse_loss(g.conv_transpose2d(ids[0], ids[1], 2, 1), g.leaf(t));
      },
      {x, k});
  CHECK(err < 1e-4);
}

TEST_CASE("bilinear_sample with zero flow is bit-exact identity") {
  Graph g;
  const Tensor src = Tensor::randn({2, 3, 7, 7}, rng);
  const int out = g.bilinear_sample(g.leaf(src), g.leaf(Tensor({2, 2, 7, 7})));
  REQUIRE(g.value(out).shape == src.shape);
  for (size_t i = 0; i < src.v.size(); ++i) CHECK(g.value(out).v[i] == src.v[i]);
}

TEST_CASE("bilinear_sample integer flow shifts interior pixels exactly") {
  Graph g;
  const int h = 6, w = 6;
  const Tensor src = Tensor::randn({1, 1, h, w}, rng);
  Tensor flow({1, 2, h, w});
  for (int i = 0; i < h * w; ++i) flow.v[static_cast<size_t>(i)] = 1.0;  // dx = 1
  const int out = g.bilinear_sample(g.leaf(src), g.leaf(flow));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j + 1 < w; ++j)
      CHECK(g.value(out).v[static_cast<size_t>(i) * w + j] ==
            src.v[static_cast<size_t>(i) * w + j + 1]);
}

TEST_CASE("bilinear_sample clamps out-of-bounds locations to the border") {
  Graph g;
  const Tensor src({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor flow = Tensor::full({1, 2, 2, 2}, 50.0);  // everything far right+down
  const int out = g.bilinear_sample(g.leaf(src), g.leaf(flow));
  for (double v : g.value(out).v) CHECK(v == doctest::Approx(4.0));
}

TEST_CASE("bilinear_sample gradients match finite differences at non-integer points") {
  const int h = 6, w = 6;
  const Tensor src = Tensor::randn({1, 2, h, w}, rng);
  Tensor flow = Tensor::uniform({1, 2, h, w}, rng, -1.2, 1.2);
  for (double& f : flow.v) f += 0.31;  // keep sampling points away from the integer lattice
  const Tensor t = Tensor::randn({1, 2, h, w}, rng);
  const double err = fd_check(
      [&](Graph& g, const std::vector<int>& ids) {
        return g.mse_loss(g.bilinear_sample(ids[0], ids[1]), g.leaf(t));
      },
      {src, flow});
  CHECK(err < 1e-4);
}

TEST_CASE("core op values") {
  Graph g;
  const int r = g.relu(g.leaf(Tensor({2}, {-1.0, 2.0})));
  CHECK(g.value(r).v[0] == 0.0);
  CHECK(g.value(r).v[1] == 2.0);

  const Tensor x = Tensor::randn({3, 4}, rng);
  CHECK(g.value(g.l1_loss(g.leaf(x), g.leaf(x))).v[0] == 0.0);
  CHECK(g.value(g.mse_loss(g.leaf(x), g.leaf(x))).v[0] == 0.0);

  const int m = g.mean(g.leaf(Tensor({4}, {1.0, 2.0, 3.0, 6.0})));
  CHECK(g.value(m).v[0] == doctest::Approx(3.0));

  const int cat = g.concat(1, {g.leaf(Tensor({1, 2}, {1, 2})), g.leaf(Tensor({1, 3}, {3, 4, 5}))});
  CHECK(g.value(cat).shape == std::vector<int>{1, 5});
  CHECK(g.value(cat).v[3] == 4.0);

  const int sl = g.slice(cat, 1, 1, 4);
  CHECK(g.value(sl).shape == std::vector<int>{1, 3});
  CHECK(g.value(sl).v[0] == 2.0);

  CHECK_THROWS_AS(g.add(g.leaf(Tensor({2})), g.leaf(Tensor({3}))), ShapeError);
  CHECK_THROWS_AS(g.linear(g.leaf(Tensor({2, 3})), g.leaf(Tensor({4, 2})), g.leaf(Tensor({2}))),
                  ShapeError);
}

TEST_CASE("core op gradients match finite differences") {
  const Tensor a = Tensor::randn({3, 4}, rng);
  const Tensor b = Tensor::randn({3, 4}, rng);
  const Tensor w = Tensor::randn({4, 2}, rng);
  const Tensor bias = Tensor::randn({2}, rng);
  const Tensor t = Tensor::randn({3, 2}, rng);

  CHECK(fd_check([&](Graph& g, const std::vector<int>& ids) { return g.l1_loss(ids[0], ids[1]); },
                 {a, b}) < 1e-4);
  CHECK(fd_check([&](Graph& g, const std::vector<int>& ids) { return g.mse_loss(ids[0], ids[1]); },
                 {a, b}) < 1e-4);
  CHECK(fd_check(
            [&](Graph& g, const std::vector<int>& ids) {
              return g.mse_loss(g.linear(ids[0], ids[1], ids[2]), g.leaf(t));
            },
            {a, w, bias}) < 1e-4);
  CHECK(fd_check(
            [&](Graph& g, const std::vector<int>& ids) {
              // relu checked away from 0 by construction of the offset
              int y = g.relu(g.add(ids[0], g.leaf(Tensor::full({3, 4}, 0.173))));
              return g.sum_sq(y);
            },
            {a}) < 1e-4);
  CHECK(fd_check(
            [&](Graph& g, const std::vector<int>& ids) {
              int cat = g.concat(1, {ids[0], ids[1]});
              int sl = g.slice(cat, 1, 2, 7);
              int mean = g.mean_axis0(sl);
              int d = g.sub(sl, g.broadcast_rows(mean, 3));
              return g.sum_sq(d);
            },
            {a, b}) < 1e-4);
  CHECK(fd_check(
            [&](Graph& g, const std::vector<int>& ids) {
              return g.mean(g.reshape(g.scale(ids[0], 2.5), {12}));
            },
            {a}) < 1e-4);
}

TEST_CASE("backward: analytic gradient of sum of squares") {
  Graph g;
  const Tensor w = Tensor::randn({5}, rng);
  const int wid = g.leaf(w, true);
  g.backward(g.sum_sq(wid));
  for (int i = 0; i < 5; ++i)
    CHECK(g.gradient(wid).v[static_cast<size_t>(i)] == doctest::Approx(2.0 * w.v[static_cast<size_t>(i)]));
}

TEST_CASE("backward: fan-out accumulates both paths") {
  Graph g;
  const int w = g.leaf(Tensor({1}, {3.0}), true);
  const int y = g.add(w, w);
  g.backward(g.mean(y));
  CHECK(g.gradient(w).v[0] == doctest::Approx(2.0));
}

TEST_CASE("backward usage errors") {
  Graph g;
  const int w = g.leaf(Tensor::randn({3}, rng), true);
  CHECK_THROWS_AS(g.backward(w), UsageError);  // non-scalar loss
  const int loss = g.sum_sq(w);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), UsageError);  // repeated without reset
  g.reset_grads();
  g.backward(loss);  // fine after reset
  CHECK(g.gradient(w).numel() == 3);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamSet ps;
  ps.add("w", Tensor::randn({4}, rng));
  const Tensor before = ps.get("w").value;
  ps.accumulate_grads({Tensor({4})}, 1.0);
  ps.adam_step({});
  for (int i = 0; i < 4; ++i) CHECK(ps.get("w").value.v[static_cast<size_t>(i)] == before.v[static_cast<size_t>(i)]);
}

TEST_CASE("adam: constant gradient step size approaches lr * sign(g)") {
  ParamSet ps;
  ps.add("w", Tensor({1}, {0.0}));
  AdamConfig cfg;
  cfg.lr = 1e-3;
  Tensor g({1}, {2.5});
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 5000; ++i) {
    ps.accumulate_grads({g}, 1.0);
    ps.adam_step(cfg);
    step = prev - ps.get("w").value.v[0];
    prev = ps.get("w").value.v[0];
  }
  CHECK(step == doctest::Approx(cfg.lr).epsilon(1e-3));  // lr * sign(2.5)
}

TEST_CASE("adam: one step on a quadratic bowl reduces the loss") {
  ParamSet ps;
  ps.add("w", Tensor({2}, {1.0, -2.0}));
  auto loss = [&]() {
    const Tensor& w = ps.get("w").value;
    return w.v[0] * w.v[0] + w.v[1] * w.v[1];
  };
  const double l0 = loss();
  Tensor g({2}, {2.0 * 1.0, 2.0 * -2.0});
  ps.accumulate_grads({g}, 1.0);
  AdamConfig cfg;
  cfg.lr = 1e-3;
  ps.adam_step(cfg);
  CHECK(loss() < l0);
}

TEST_CASE("adam: missing gradient names the parameter") {
  ParamSet ps;
  ps.add("enc.w", Tensor::randn({2}, rng));
  try {
    ps.adam_step({});
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("enc.w") != std::string::npos);
  }
}

TEST_CASE("checkpoint round-trip is bit-exact and corruption is detected") {
  const std::string dir = std::filesystem::temp_directory_path() / "iip_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/a.ckpt";

  iip::grad::Checkpoint ck;
  ck.step = 17;
  ck.config_json = "{\"alpha\":1}";
  ck.params.add("w1", Tensor::randn({3, 4}, rng));
  ck.params.add("w2", Tensor::randn({2}, rng));
  for (auto& p : ck.params.params()) {
    p.m = Tensor::randn(p.value.shape, rng);
    p.s = Tensor::randn(p.value.shape, rng);
  }
  save_checkpoint(path, ck);

  const iip::grad::Checkpoint back = iip::grad::load_checkpoint(path);
  CHECK(back.step == 17);
  CHECK(back.config_json == ck.config_json);
  REQUIRE(back.params.count() == 2);
  for (size_t i = 0; i < 2; ++i) {
    const auto& a = ck.params.params()[i];
    const auto& b = back.params.params()[i];
    CHECK(a.name == b.name);
    CHECK(a.value.v == b.value.v);
    CHECK(a.m.v == b.m.v);
    CHECK(a.s.v == b.s.v);
  }

  // byte-for-byte determinism of the writer
  save_checkpoint(dir + "/b.ckpt", ck);
  CHECK(iip::io::read_file(path) == iip::io::read_file(dir + "/b.ckpt"));

  std::vector<uint8_t> bytes = iip::io::read_file(path);
  bytes.pop_back();
  iip::io::write_file(dir + "/trunc.ckpt", bytes);
  CHECK_THROWS_AS(iip::grad::load_checkpoint(dir + "/trunc.ckpt"), iip::io::FormatError);

  bytes = iip::io::read_file(path);
  bytes[bytes.size() / 2] ^= 0x01;
  iip::io::write_file(dir + "/flip.ckpt", bytes);
  CHECK_THROWS_AS(iip::grad::load_checkpoint(dir + "/flip.ckpt"), iip::io::FormatError);
}

TEST_CASE("graph evaluation is deterministic") {
  auto run = [] {
    std::mt19937_64 r(7);
    Graph g;
    const int x = g.leaf(Tensor::randn({2, 3, 8, 8}, r));
    const int k = g.leaf(Tensor::randn({4, 3, 4, 4}, r));
    return g.value(g.conv2d(x, k, 2, 1)).v;
  };
  CHECK(run() == run());
}
