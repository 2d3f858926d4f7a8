#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "iip/binio.hpp"
#include "iip/eval.hpp"
#include "iip/image_io.hpp"

using namespace iip::eval;
using iip::grad::Tensor;
using iip::sim::Frame;
using iip::sim::Property;

namespace {

std::mt19937_64 rng(23);

Frame frame_of(std::vector<float> px, int h, int w, int c) {
  Frame f;
  f.height = h;
  f.width = w;
  f.channels = c;
  f.pixels = std::move(px);
  return f;
}

}  // namespace

TEST_CASE("pixel_error: direct arithmetic on the 0..255 scale") {
  const Frame a = frame_of({0.0f, 0.0f}, 2, 1, 1);
  const Frame b = frame_of({1.0f, 0.0f}, 2, 1, 1);  // 255 vs 0, 0 vs 0
  CHECK(pixel_error(a, b, Metric::l1_sum) == doctest::Approx(255.0));
  CHECK(pixel_error(a, b, Metric::sse) == doctest::Approx(65025.0));
  CHECK(pixel_error(a, a, Metric::l1_sum) == 0.0);
  CHECK(pixel_error(b, b, Metric::sse) == 0.0);
  const Frame c = frame_of({0.0f}, 1, 1, 1);
  CHECK_THROWS_AS(pixel_error(a, c, Metric::sse), iip::grad::ShapeError);
}

TEST_CASE("top_variance_dims: constructed oracle and tie-breaking") {
  // dims 0 and 1 vary with the batch; everything else is constant
  std::vector<Tensor> mats;
  for (int b = 0; b < 4; ++b) {
    Tensor m({5, 6});
    for (int k = 0; k < 5; ++k) {
      m.v[static_cast<size_t>(k) * 6 + 0] = 2.0 * k + b;
      m.v[static_cast<size_t>(k) * 6 + 1] = -1.5 * k;
      for (int j = 2; j < 6; ++j) m.v[static_cast<size_t>(k) * 6 + j] = 0.7 * j + b;
    }
    mats.push_back(std::move(m));
  }
  CHECK(top_variance_dims(mats, 2) == std::vector<int>{0, 1});

  // constant codes: all-zero variance, lowest-index dims win
  std::vector<Tensor> flat{Tensor::full({5, 6}, 3.0)};
  CHECK(top_variance_dims(flat, 3) == std::vector<int>{0, 1, 2});
}

TEST_CASE("interpolate_code: endpoints are exact and the blend is linear") {
  const std::vector<int> dims{0, 1, 2};
  const Tensor lo = Tensor::randn({8}, rng);
  const Tensor hi = Tensor::randn({8}, rng);
  CHECK(interpolate_code(lo, hi, 1, dims).v == lo.v);  // i=1 is z_low exactly

  const Tensor at5 = interpolate_code(lo, hi, 5, dims);
  for (int d : dims) CHECK(at5.v[static_cast<size_t>(d)] == hi.v[static_cast<size_t>(d)]);
  for (int j = 3; j < 8; ++j) CHECK(at5.v[static_cast<size_t>(j)] == lo.v[static_cast<size_t>(j)]);

  const Tensor mid = interpolate_code(lo, hi, 3, dims);
  for (int d : dims)
    CHECK(mid.v[static_cast<size_t>(d)] ==
          doctest::Approx(0.5 * (lo.v[static_cast<size_t>(d)] + hi.v[static_cast<size_t>(d)])));
  CHECK_THROWS_AS(interpolate_code(lo, hi, 6, dims), std::out_of_range);
}

TEST_CASE("switch_property: locality and involution") {
  const std::vector<int> dims{2, 3};
  const Tensor a = Tensor::randn({6}, rng);
  const Tensor b = Tensor::randn({6}, rng);

  CHECK(switch_property(a, a, dims).v == a.v);  // self-switch is the identity

  const Tensor sw = switch_property(a, b, dims);
  for (int j = 0; j < 6; ++j) {
    const bool in_block = j == 2 || j == 3;
    CHECK(sw.v[static_cast<size_t>(j)] ==
          (in_block ? b.v[static_cast<size_t>(j)] : a.v[static_cast<size_t>(j)]));
  }
  // applying the switch twice with donor a restores a
  CHECK(switch_property(sw, a, dims).v == a.v);
}

TEST_CASE("variance_share: trivial cases and the proportionality null") {
  // codes varying only inside the block -> 1.0
  Tensor only({5, 8});
  for (int k = 0; k < 5; ++k) {
    only.v[static_cast<size_t>(k) * 8 + 0] = 1.0 * k;
    only.v[static_cast<size_t>(k) * 8 + 1] = -2.0 * k;
    for (int j = 2; j < 8; ++j) only.v[static_cast<size_t>(k) * 8 + j] = 0.4 * j;
  }
  CHECK(variance_share(only, {0, 1}) == doctest::Approx(1.0));

  // isotropic random codes: expectation k/D (here 8/64 = 0.125)
  double mean = 0.0;
  const int draws = 600;
  std::vector<int> dims(8);
  for (int i = 0; i < 8; ++i) dims[static_cast<size_t>(i)] = i;
  for (int t = 0; t < draws; ++t) mean += variance_share(Tensor::randn({5, 64}, rng), dims);
  mean /= draws;
  CHECK(mean == doctest::Approx(0.125).epsilon(0.08));
}

TEST_CASE("linear flow extrapolation: static and constant-velocity scenes") {
  iip::sim::RenderConfig render;
  render.width = 32;
  render.height = 32;
  iip::sim::BodyState far;
  far.position = {100.0, 2.0};
  iip::sim::BodyState d;
  d.shape = iip::sim::ShapeKind::disc;
  d.size = 1.2;
  d.position = {1.0, 2.0};

  // static: three zero flows extrapolate to zero
  iip::sim::Sequence still;
  for (int f = 0; f < 5; ++f) still.frames.push_back(rasterize(d, far, render));
  for (int f = 0; f < 4; ++f) still.gt_flows.push_back(ground_truth_flow({d, far}, {d, far}, render));
  const iip::sim::FlowField zf = linear_flow_extrapolation(still);
  for (float v : zf.d) CHECK(v == 0.0f);

  // constant velocity: prediction is near-exact
  const double step = 0.07;  // meters per frame
  iip::sim::Sequence moving;
  std::vector<iip::sim::BodyState> states;
  for (int f = 0; f < 5; ++f) {
    iip::sim::BodyState s = d;
    s.position.x += step * f;
    states.push_back(s);
    moving.frames.push_back(rasterize(s, far, render));
  }
  for (int f = 0; f < 4; ++f)
    moving.gt_flows.push_back(
        ground_truth_flow({states[static_cast<size_t>(f)], far}, {states[static_cast<size_t>(f + 1)], far}, render));

  const iip::sim::FlowField pred_flow = linear_flow_extrapolation(moving);
  // warp frame 3 by the extrapolated flow and compare against frame 4
  iip::grad::Graph g;
  const int src = g.leaf(iip::net::frames_to_tensor({&moving.frames[3]}));
  const int fl = g.leaf(iip::net::flow_to_tensor({&pred_flow}));
  const Frame warped = iip::net::tensor_to_frame(g.value(g.bilinear_sample(src, fl)), 0);

  // beats the zero-motion floor overall
  const double err = pixel_error(warped, moving.frames[4], Metric::sse);
  const double identity_err = pixel_error(moving.frames[3], moving.frames[4], Metric::sse);
  CHECK(err < 0.85 * identity_err);

  // and is near-exact wherever the per-pixel history is well defined: the
  // extrapolated flow matches the true rigid flow and reconstruction is tight
  const iip::sim::FlowField ref = ground_truth_flow({states[3], far}, {states[4], far}, render);
  int interior = 0, covered = 0;
  double mae = 0.0;
  for (int i = 0; i < ref.height; ++i)
    for (int j = 0; j < ref.width; ++j) {
      if (ref.dx(i, j) == 0.0f && ref.dy(i, j) == 0.0f) continue;
      ++covered;
      if (std::abs(pred_flow.dx(i, j) - ref.dx(i, j)) > 0.05f ||
          std::abs(pred_flow.dy(i, j) - ref.dy(i, j)) > 0.05f)
        continue;
      ++interior;
      for (int c = 0; c < 3; ++c) mae += std::abs(warped.at(i, j, c) - moving.frames[4].at(i, j, c));
    }
  REQUIRE(covered > 0);
  CHECK(interior > covered / 2);
  CHECK(mae / (3 * interior) < 0.02);
}

TEST_CASE("reports: long and wide CSV layouts") {
  EvalReport r;
  r.name = "interpolation";
  r.metric = "sse";
  r.cells = {{"ours", "scale_2", 10.5, 4},
             {"ours", "scale_3", 11.0, 4},
             {"baseline", "scale_2", 14.0, 4},
             {"baseline", "scale_3", 17.5, 4}};
  const std::string longform = report_csv(r);
  CHECK(longform.find("method,condition,metric,value,count") == 0);
  CHECK(longform.find("ours,scale_2,sse,10.5,4") != std::string::npos);
  const std::string wide = report_wide_csv(r);
  CHECK(wide.find("method,scale_2,scale_3") == 0);
  CHECK(wide.find("baseline,14,17.5") != std::string::npos);
  CHECK(r.get("ours", "scale_3") == doctest::Approx(11.0));
  CHECK_THROWS_AS(r.get("ours", "scale_9"), std::out_of_range);
}

TEST_CASE("block views: layout blocks vs assigned dims") {
  iip::net::ModelConfig cfg;
  cfg.resolution = 16;
  cfg.stem_widths = {2, 2};
  cfg.head_conv = 3;
  cfg.fc_hidden = 8;
  cfg.layout = {2, 2, 2, 6};
  cfg.decoder_base = 4;
  iip::net::PhysNet model(cfg);

  const ModelBlocks ours = disentangled_blocks(model);
  CHECK(ours.prop_dims[0] == std::vector<int>{0, 1});
  CHECK(ours.prop_dims[1] == std::vector<int>{2, 3});
  CHECK(ours.prop_dims[2] == std::vector<int>{4, 5});

  DimAssignment asg;
  asg.k = 2;
  asg.dims = {std::vector<int>{7, 9}, std::vector<int>{0, 4}, std::vector<int>{1, 2}};
  const ModelBlocks base = assigned_blocks(model, asg);
  CHECK(base.prop_dims[0] == std::vector<int>{7, 9});
  CHECK(base.method == "baseline");
}

TEST_CASE("image io: ppm bytes and strips") {
  const auto dir = std::filesystem::temp_directory_path() / "iip_img";
  std::filesystem::create_directories(dir);
  Frame f = frame_of({0.0f, 0.5f, 1.0f, 0.25f, 0.75f, 0.1f,
                      0.2f, 0.3f, 0.4f, 0.9f, 0.8f, 0.7f},
                     2, 2, 3);
  iip::imageio::write_ppm(f, (dir / "f.ppm").string());
  const auto bytes = iip::io::read_file((dir / "f.ppm").string());
  const std::string head(bytes.begin(), bytes.begin() + 11);
  CHECK(head == "P6\n2 2\n255\n");
  CHECK(bytes.size() == 11 + 12);

  const Frame strip = iip::imageio::hstrip({&f, &f, &f}, 2);
  CHECK(strip.width == 3 * 2 + 2 * 2);
  CHECK(strip.height == 2);
  CHECK(strip.at(0, 0, 0) == f.at(0, 0, 0));
  CHECK(strip.at(1, 4, 2) == f.at(1, 0, 2));
}
