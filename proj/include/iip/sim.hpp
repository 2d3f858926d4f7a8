#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iip::sim {

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2() = default;
  Vec2(double x_, double y_) : x(x_), y(y_) {}

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2 operator-() const { return {-x, -y}; }
  Vec2& operator+=(const Vec2& o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  Vec2& operator-=(const Vec2& o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double cross(const Vec2& o) const { return x * o.y - y * o.x; }
  double norm() const { return std::sqrt(x * x + y * y); }
  double norm_sq() const { return x * x + y * y; }
  Vec2 perp() const { return {-y, x}; }
  Vec2 rotated(double a) const {
    const double c = std::cos(a), s = std::sin(a);
    return {c * x - s * y, s * x + c * y};
  }
};

enum class ShapeKind { disc, square, tallbox, wedge };

const char* shape_name(ShapeKind k);
ShapeKind shape_from_name(const std::string& name);

// local-frame CCW vertices; empty for disc
std::vector<Vec2> shape_polygon(ShapeKind kind, double size);
double disc_radius(double size);
double shape_area(ShapeKind kind, double size);

struct BodyState {
  Vec2 position;
  Vec2 velocity;
  double orientation = 0.0;        // rad
  double angular_velocity = 0.0;   // rad/s
  ShapeKind shape = ShapeKind::disc;
  double size = 0.7;               // m
  double mass = 1.0;               // kg
  double restitution = 0.5;        // [0,1]

  bool finite() const;
};

double body_inertia(const BodyState& b);
// world-space vertices (empty for disc)
std::vector<Vec2> world_polygon(const BodyState& b);
bool point_in_body(const BodyState& b, const Vec2& p);
// half-extent of the body along +x at its current orientation
double half_extent_x(const BodyState& b);
// lowest surface point offset below the center (>= 0)
double support_below(const BodyState& b);

enum class Property { mass, speed, friction };
const char* property_name(Property p);
Property property_from_name(const std::string& name);

// Desk-unit grids: mass 1..5 kg, speed 2..10 m/s, friction mu 0.1..0.5.
double scale_to_value(Property p, int scale);
// Source-engine grid values (100..500, 10000..50000, 0.01..0.05); stored in
// the manifest as provenance only.
double paper_grid_value(Property p, int scale);

struct RenderConfig {
  int width = 64;
  int height = 64;
  int channels = 3;
  double world_width = 5.0;   // meters spanned horizontally; pixels are square
  double world_cx = 2.0;      // world x at the horizontal center
  double floor_frac = 0.125;  // fraction of the image below y=0
  int supersample = 4;        // AA samples per pixel edge

  double px_per_m() const { return width / world_width; }
  double world_height() const { return world_width * height / static_cast<double>(width); }
  double world_x0() const { return world_cx - world_width / 2.0; }
  double world_y_top() const { return world_height() * (1.0 - floor_frac); }
};

struct Frame {
  int height = 0, width = 0, channels = 0;
  std::vector<float> pixels;  // HWC row-major, intensities in [0,1]

  float at(int i, int j, int c) const {
    return pixels[(static_cast<size_t>(i) * width + j) * channels + c];
  }
};

struct FlowField {
  int height = 0, width = 0;
  std::vector<float> d;  // HW2, (dx, dy) in pixels, sampling offset for the warp

  float dx(int i, int j) const { return d[(static_cast<size_t>(i) * width + j) * 2]; }
  float dy(int i, int j) const { return d[(static_cast<size_t>(i) * width + j) * 2 + 1]; }
};

enum class LayoutMode { collision, static_probe };

struct SceneSpec {
  BodyState mover;  // template; initial speed comes from speed_scale
  BodyState target; // template; mass comes from mass_scale
  int mass_scale = 1;
  int speed_scale = 1;
  int friction_scale = 1;
  uint64_t variation_seed = 0;
  double frame_interval = 0.25;  // simulated seconds between sampled frames
  int frame_count = 5;
  int substeps = 100;            // physics substeps per frame interval
  double target_x = 3.2;         // world x where the struck body rests
  LayoutMode mode = LayoutMode::collision;
};

struct Sequence {
  std::vector<Frame> frames;       // frame_count frames
  std::vector<FlowField> gt_flows; // frame_count-1 fields, one per transition
  SceneSpec spec;
  int contact_frame_index = -1;    // always 2 for collision sequences
};

struct LayoutError : std::runtime_error {
  explicit LayoutError(const std::string& m) : std::runtime_error(m) {}
};
struct DivergedError : std::runtime_error {
  explicit DivergedError(const std::string& m) : std::runtime_error(m) {}
};

struct StepOptions {
  double gravity = 9.8;       // m/s^2, downward
  bool floor_enabled = true;  // floor plane at y = 0
};

// One semi-implicit Euler substep with impulse contact resolution. Coulomb
// friction with coefficient floor_mu acts at floor contacts and at the
// body-body contact.
std::pair<BodyState, BodyState> step(std::pair<BodyState, BodyState> states, double floor_mu,
                                     double dt, const StepOptions& opt = {});

// Deterministic end-to-end scene generation: settle, align first contact
// between sampled frames 1 and 2 via a pre-roll gap search, then record
// frames and ground-truth flows.
Sequence simulate(const SceneSpec& spec, const RenderConfig& render);

// Flat-shaded coverage-AA raster; mover drawn over target, floor strip below
// y=0, uniform background elsewhere.
Frame rasterize(const BodyState& mover, const BodyState& target, const RenderConfig& render);

// Per-pixel rigid-motion flow on the t+1 frame: each body pixel maps back to
// its pre-image under that body's motion between t and t+1 ((dx,dy) such that
// sampling frame_t at (i+dy, j+dx) reconstructs frame_{t+1}); background 0;
// mover wins occlusion ties.
FlowField ground_truth_flow(const std::pair<BodyState, BodyState>& states_t,
                            const std::pair<BodyState, BodyState>& states_t1,
                            const RenderConfig& render);

}  // namespace iip::sim
