// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace s2diff::sim {

namespace {

constexpr uint64_t kWipingLayoutSalt = 0x57495045ull;   // stream tag for wiping resets
constexpr uint64_t kScoopingLayoutSalt = 0x53434f4full; // stream tag for scooping resets
constexpr uint64_t kScatterSalt = 0x52454c31ull;        // release landing scatter
constexpr double kScribbleStampRadius = 1.2;
constexpr double kParticleRadius = 1.2;
constexpr double kCarryRingRadiusPx = kToolRadiusPx + 1.7;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

void check_action(const std::vector<double>& a, int dim) {
  if (static_cast<int>(a.size()) != dim) {
    throw std::invalid_argument("action has " + std::to_string(a.size()) +
                                " components, expected " + std::to_string(dim));
  }
  for (double v : a) {
    if (!std::isfinite(v)) throw std::invalid_argument("action component is not finite");
  }
}

// Pixel indices whose centers lie within radius r of (cx, cy), px coords.
std::vector<int> disk_cells(double cx, double cy, double r) {
  std::vector<int> cells;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)) - 1);
  const int x1 = std::min(kFrame - 1, static_cast<int>(std::ceil(cx + r)) + 1);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)) - 1);
  const int y1 = std::min(kFrame - 1, static_cast<int>(std::ceil(cy + r)) + 1);
  const double r2 = r * r;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r2) cells.push_back(y * kFrame + x);
    }
  }
  return cells;
}

void paint_cells(ImageU8& img, const std::vector<int>& cells, uint8_t r, uint8_t g, uint8_t b) {
  for (int idx : cells) {
    img.set_px(idx / kFrame, idx % kFrame, r, g, b);
  }
}

void stamp_depth(GridF& d, const std::vector<int>& cells, float value) {
  for (int idx : cells) d.v[idx] = std::min(d.v[idx], value);
}

void stamp_mask(GridF& m, const std::vector<int>& cells) {
  for (int idx : cells) m.v[idx] = 1.0f;
}

void fill_background(ImageU8& img, uint8_t base_r, uint8_t base_g, uint8_t base_b,
                     uint64_t background_seed) {
  for (int y = 0; y < kFrame; ++y) {
    for (int x = 0; x < kFrame; ++x) {
      const uint64_t h = splitmix64(background_seed * 0x9e3779b97f4a7c15ull +
                                    static_cast<uint64_t>(y * kFrame + x) + 1);
      const int d = static_cast<int>(h % 13) - 6;
      auto sh = [&](uint8_t c) {
        return static_cast<uint8_t>(std::clamp(static_cast<int>(c) + d, 0, 255));
      };
      img.set_px(y, x, sh(base_r), sh(base_g), sh(base_b));
    }
  }
}

struct Rgb {
  uint8_t r, g, b;
};

Rgb scribble_color(const std::string& style) {
  if (style == "red") return {204, 38, 33};
  if (style == "green") return {36, 158, 56};
  if (style == "black") return {26, 26, 30};
  throw std::invalid_argument("unknown wiping render_style: " + style);
}

Rgb particle_color(const std::string& style, int index) {
  if (style == "rice") return {238, 234, 220};
  if (style == "choco") return {118, 76, 42};
  if (style == "hearts") return {226, 96, 134};
  if (style == "mixed") {
    switch (index % 3) {
      case 0: return {118, 76, 42};
      case 1: return {226, 96, 134};
      default: return {246, 204, 92};
    }
  }
  throw std::invalid_argument("unknown scooping render_style: " + style);
}

void validate_style(const InstanceSpec& instance) {
  if (instance.category == Task::kWiping) {
    scribble_color(instance.render_style);
  } else {
    particle_color(instance.render_style, 0);
  }
}

// Carried particles ride a fixed ring just outside the tool footprint so the
// carry state stays visible in rgb, masks, and depth.
void ring_offset(int slot, double& dx, double& dy) {
  const double ang = 2.0 * M_PI * slot / kCarryCapacity;
  dx = kCarryRingRadiusPx * std::cos(ang) / kFrame;
  dy = kCarryRingRadiusPx * std::sin(ang) / kFrame;
}

}  // namespace

Task task_from_string(const std::string& name) {
  if (name == "wiping") return Task::kWiping;
  if (name == "scooping") return Task::kScooping;
  throw std::invalid_argument("unknown task: " + name);
}

std::string to_string(Task task) {
  return task == Task::kWiping ? "wiping" : "scooping";
}

// ---------------------------------------------------------------------------
// Wiping

EnvObs Scrub2DEnv::reset(const InstanceSpec& instance, uint64_t seed) {
  if (instance.category != Task::kWiping) {
    throw std::invalid_argument("instance category does not match wiping env");
  }
  validate_style(instance);
  instance_ = instance;

  Rng rng(mix_seed(seed, kWipingLayoutSalt));
  state_ = Scrub2DState{};
  state_.scribble.assign(kFrame * kFrame, 0);

  // Random polyline stroke, stamped with a round nib.
  double x = rng.uniform(0.2, 0.8);
  double y = rng.uniform(0.2, 0.8);
  double heading = rng.uniform(0.0, 2.0 * M_PI);
  const int segments = static_cast<int>(rng.uniform_int(3, 5));
  for (int s = 0; s < segments; ++s) {
    if (s > 0) heading += rng.uniform(-M_PI / 3.0, M_PI / 3.0);
    const double len = rng.uniform(0.12, 0.22);
    const int n = std::max(2, static_cast<int>(std::ceil(len * kFrame * 2)));
    for (int i = 0; i <= n; ++i) {
      const double px = std::clamp(x + std::cos(heading) * len * i / n, 0.06, 0.94) * kFrame;
      const double py = std::clamp(y + std::sin(heading) * len * i / n, 0.06, 0.94) * kFrame;
      for (int idx : disk_cells(px, py, kScribbleStampRadius)) state_.scribble[idx] = 1;
    }
    x = std::clamp(x + std::cos(heading) * len, 0.08, 0.92);
    y = std::clamp(y + std::sin(heading) * len, 0.08, 0.92);
  }
  state_.initial_cells =
      static_cast<int>(std::count(state_.scribble.begin(), state_.scribble.end(), 1));

  state_.ee_x = rng.uniform(0.1, 0.9);
  state_.ee_y = rng.uniform(0.1, 0.9);
  return observe();
}

StepOutcome Scrub2DEnv::step(const std::vector<double>& action) {
  check_action(action, action_dim());
  state_.ee_x = clamp01(state_.ee_x + clamp_unit(action[0]) * kDt);
  state_.ee_y = clamp01(state_.ee_y + clamp_unit(action[1]) * kDt);
  for (int idx : disk_cells(state_.ee_x * kFrame, state_.ee_y * kFrame, kToolRadiusPx)) {
    state_.scribble[idx] = 0;
  }
  ++state_.steps;

  StepOutcome out;
  out.success = success();
  out.done = out.success || state_.steps >= step_limit();
  out.metric = metric();
  out.steps = state_.steps;
  out.obs = observe();
  return out;
}

std::vector<double> Scrub2DEnv::expert_action(Rng& rng) const {
  // Nearest-cell chase with a lateral sweep; zero once the board is clean.
  double best = std::numeric_limits<double>::max();
  double tx = 0.0, ty = 0.0;
  for (int idx = 0; idx < kFrame * kFrame; ++idx) {
    if (!state_.scribble[idx]) continue;
    const double cx = (idx % kFrame + 0.5) / kFrame;
    const double cy = (idx / kFrame + 0.5) / kFrame;
    const double dx = cx - state_.ee_x;
    const double dy = cy - state_.ee_y;
    const double d2 = dx * dx + dy * dy;
    if (d2 < best) {
      best = d2;
      tx = cx;
      ty = cy;
    }
  }
  if (best == std::numeric_limits<double>::max()) return {0.0, 0.0};

  const double dx = tx - state_.ee_x;
  const double dy = ty - state_.ee_y;
  const double dist = std::sqrt(best) + 1e-12;
  double vx = 8.0 * dx;
  double vy = 8.0 * dy;
  const double sweep = 0.35 * std::sin(0.6 * state_.steps);
  vx += sweep * (-dy / dist);
  vy += sweep * (dx / dist);
  vx += rng.normal(0.0, 0.05);
  vy += rng.normal(0.0, 0.05);
  return {clamp_unit(vx), clamp_unit(vy)};
}

GridF Scrub2DEnv::term_mask(const std::string& term) const {
  GridF m{kFrame, kFrame, std::vector<float>(kFrame * kFrame, 0.0f)};
  if (term == "handwriting" || term == "scribble") {
    for (int idx = 0; idx < kFrame * kFrame; ++idx) {
      if (state_.scribble[idx]) m.v[idx] = 1.0f;
    }
  } else if (term == "sponge") {
    stamp_mask(m, disk_cells(state_.ee_x * kFrame, state_.ee_y * kFrame, kToolRadiusPx));
  }
  return m;
}

GridF Scrub2DEnv::pseudo_depth() const {
  // Flat board; ink adds no height. Only the tool stands off the surface.
  GridF d{kFrame, kFrame, std::vector<float>(kFrame * kFrame, 1.0f)};
  stamp_depth(d, disk_cells(state_.ee_x * kFrame, state_.ee_y * kFrame, kToolRadiusPx), 0.3f);
  return d;
}

percept::PerceptionResult Scrub2DEnv::ground_truth_perception(
    const percept::PerceptionPrompt& prompt) const {
  percept::PerceptionResult res;
  res.masks.h = kFrame;
  res.masks.w = kFrame;
  for (const std::string& term : prompt.terms()) {
    res.masks.labels.push_back(term);
    res.masks.masks.push_back(term_mask(term));
  }
  res.raw_depth = pseudo_depth();
  return res;
}

ImageU8 Scrub2DEnv::render() const {
  ImageU8 img(kFrame, kFrame, 3);
  fill_background(img, 236, 236, 240, instance_.background_seed);

  const Rgb ink = scribble_color(instance_.render_style);
  for (int idx = 0; idx < kFrame * kFrame; ++idx) {
    if (state_.scribble[idx]) img.set_px(idx / kFrame, idx % kFrame, ink.r, ink.g, ink.b);
  }

  const double ex = state_.ee_x * kFrame;
  const double ey = state_.ee_y * kFrame;
  paint_cells(img, disk_cells(ex, ey, kToolRadiusPx), 232, 203, 96);
  for (int idx : disk_cells(ex, ey, kToolRadiusPx)) {
    const double dx = idx % kFrame + 0.5 - ex;
    const double dy = idx / kFrame + 0.5 - ey;
    if (dx * dx + dy * dy > 3.2 * 3.2) img.set_px(idx / kFrame, idx % kFrame, 176, 148, 58);
  }
  return img;
}

EnvObs Scrub2DEnv::observe() const {
  return {render(), {state_.ee_x, state_.ee_y}};
}

bool Scrub2DEnv::success() const {
  const int remaining =
      static_cast<int>(std::count(state_.scribble.begin(), state_.scribble.end(), 1));
  const int cleared = state_.initial_cells - remaining;
  return state_.initial_cells > 0 && cleared >= 0.99 * state_.initial_cells - 1e-9;
}

double Scrub2DEnv::metric() const {
  if (state_.initial_cells == 0) return 0.0;
  const int remaining =
      static_cast<int>(std::count(state_.scribble.begin(), state_.scribble.end(), 1));
  return static_cast<double>(state_.initial_cells - remaining) / state_.initial_cells;
}

// ---------------------------------------------------------------------------
// Scooping

EnvObs Scoop2DEnv::reset(const InstanceSpec& instance, uint64_t seed) {
  if (instance.category != Task::kScooping) {
    throw std::invalid_argument("instance category does not match scooping env");
  }
  validate_style(instance);
  instance_ = instance;

  Rng rng(mix_seed(seed, kScoopingLayoutSalt));
  state_ = Scoop2DState{};
  state_.bowl_r = rng.uniform(0.14, 0.17);
  const double cy = rng.uniform(0.58, 0.72);
  const double left_cx = rng.uniform(0.20, 0.30);
  const double right_cx = rng.uniform(0.70, 0.80);
  const bool source_left = (rng.next_u64() & 1) != 0;
  state_.src_cx = source_left ? left_cx : right_cx;
  state_.dst_cx = source_left ? right_cx : left_cx;
  state_.src_cy = cy;
  state_.dst_cy = cy;

  state_.particles.resize(kParticleCount);
  for (Particle& p : state_.particles) {
    const double ang = rng.uniform(0.0, 2.0 * M_PI);
    const double rad = state_.bowl_r * 0.55 * std::sqrt(rng.uniform());
    p.x = state_.src_cx + rad * std::cos(ang);
    p.y = state_.src_cy + rad * std::sin(ang);
    p.carried = false;
    p.slot = -1;
  }

  state_.ee_x = rng.uniform(0.40, 0.60);
  state_.ee_y = rng.uniform(0.10, 0.22);
  state_.tilt = 0.4;
  return observe();
}

StepOutcome Scoop2DEnv::step(const std::vector<double>& action) {
  check_action(action, action_dim());
  state_.ee_x = clamp01(state_.ee_x + clamp_unit(action[0]) * kDt);
  state_.ee_y = clamp01(state_.ee_y + clamp_unit(action[1]) * kDt);
  state_.tilt = clamp01(state_.tilt + clamp_unit(action[2]) * kDt);

  bool slot_used[kCarryCapacity] = {};
  for (const Particle& p : state_.particles) {
    if (p.carried) slot_used[p.slot] = true;
  }

  if (state_.tilt < 0.2) {
    const double r_world = kPickupRadiusPx / kFrame;
    for (Particle& p : state_.particles) {
      if (p.carried || state_.carried >= kCarryCapacity) continue;
      const double dx = p.x - state_.ee_x;
      const double dy = p.y - state_.ee_y;
      if (dx * dx + dy * dy <= r_world * r_world) {
        int slot = 0;
        while (slot_used[slot]) ++slot;
        slot_used[slot] = true;
        p.carried = true;
        p.slot = slot;
        ++state_.carried;
      }
    }
  }

  for (Particle& p : state_.particles) {
    if (!p.carried) continue;
    double dx, dy;
    ring_offset(p.slot, dx, dy);
    p.x = state_.ee_x + dx;
    p.y = state_.ee_y + dy;
  }

  if (state_.tilt > 0.8 && state_.carried > 0) {
    for (int i = 0; i < static_cast<int>(state_.particles.size()); ++i) {
      Particle& p = state_.particles[i];
      if (!p.carried) continue;
      double dx, dy;
      ring_offset(p.slot, dx, dy);
      const uint64_t h = splitmix64(mix_seed(kScatterSalt, static_cast<uint64_t>(i),
                                             static_cast<uint64_t>(state_.steps)));
      const double jx = ((h & 0xffff) / 65535.0 - 0.5) * 1.6 / kFrame;
      const double jy = (((h >> 16) & 0xffff) / 65535.0 - 0.5) * 1.6 / kFrame;
      p.x = clamp01(state_.ee_x + 0.45 * dx + jx);
      p.y = clamp01(state_.ee_y + 0.45 * dy + jy);
      p.carried = false;
      p.slot = -1;
    }
    state_.carried = 0;
  }

  ++state_.steps;

  StepOutcome out;
  out.success = success();
  out.done = out.success || state_.steps >= step_limit();
  out.metric = metric();
  out.steps = state_.steps;
  out.obs = observe();
  return out;
}

bool Scoop2DEnv::in_target(const Particle& p) const {
  const double dx = p.x - state_.dst_cx;
  const double dy = p.y - state_.dst_cy;
  return dx * dx + dy * dy <= state_.bowl_r * state_.bowl_r;
}

int Scoop2DEnv::particles_in_target() const {
  int n = 0;
  for (const Particle& p : state_.particles) {
    if (!p.carried && in_target(p)) ++n;
  }
  return n;
}

std::vector<double> Scoop2DEnv::expert_action(Rng& rng) const {
  // Phase machine on observable state: gather until 4 carried (or nothing
  // left to pick), ferry to the empty bowl, tip out. The tilt stays mid-range
  // in transit so travel never triggers pickup or release.
  auto seek = [&](double tx, double ty, double& vx, double& vy) {
    vx = clamp_unit(8.0 * (tx - state_.ee_x));
    vy = clamp_unit(8.0 * (ty - state_.ee_y));
  };
  auto tilt_toward = [&](double target) { return clamp_unit((target - state_.tilt) / kDt); };

  int pickupable = -1;
  double best = std::numeric_limits<double>::max();
  for (int i = 0; i < static_cast<int>(state_.particles.size()); ++i) {
    const Particle& p = state_.particles[i];
    if (p.carried || in_target(p)) continue;
    const double dx = p.x - state_.ee_x;
    const double dy = p.y - state_.ee_y;
    const double d2 = dx * dx + dy * dy;
    if (d2 < best) {
      best = d2;
      pickupable = i;
    }
  }

  double vx = 0.0, vy = 0.0, vt = 0.0;
  const bool dump = state_.carried >= 4 || (state_.carried > 0 && pickupable < 0);
  if (dump) {
    const double ddx = state_.dst_cx - state_.ee_x;
    const double ddy = state_.dst_cy - state_.ee_y;
    seek(state_.dst_cx, state_.dst_cy, vx, vy);
    vt = std::sqrt(ddx * ddx + ddy * ddy) < 0.03 ? 1.0 : tilt_toward(0.45);
  } else if (pickupable >= 0) {
    const Particle& p = state_.particles[pickupable];
    seek(p.x, p.y, vx, vy);
    vt = tilt_toward(std::sqrt(best) < 0.10 ? 0.0 : 0.45);
  } else {
    return {0.0, 0.0, 0.0};
  }

  vx = clamp_unit(vx + rng.normal(0.0, 0.05));
  vy = clamp_unit(vy + rng.normal(0.0, 0.05));
  vt = clamp_unit(vt + rng.normal(0.0, 0.05));
  return {vx, vy, vt};
}

GridF Scoop2DEnv::term_mask(const std::string& term) const {
  GridF m{kFrame, kFrame, std::vector<float>(kFrame * kFrame, 0.0f)};
  if (term == "rice" || term == "cereal" || term == "particles") {
    for (const Particle& p : state_.particles) {
      stamp_mask(m, disk_cells(p.x * kFrame, p.y * kFrame, kParticleRadius));
    }
  } else if (term == "bowl" || term == "bowls") {
    stamp_mask(m, disk_cells(state_.src_cx * kFrame, state_.src_cy * kFrame,
                             state_.bowl_r * kFrame));
    stamp_mask(m, disk_cells(state_.dst_cx * kFrame, state_.dst_cy * kFrame,
                             state_.bowl_r * kFrame));
  } else if (term == "spoon") {
    stamp_mask(m, disk_cells(state_.ee_x * kFrame, state_.ee_y * kFrame, kToolRadiusPx));
  }
  return m;
}

GridF Scoop2DEnv::pseudo_depth() const {
  GridF d{kFrame, kFrame, std::vector<float>(kFrame * kFrame, 1.0f)};
  stamp_depth(d, disk_cells(state_.src_cx * kFrame, state_.src_cy * kFrame,
                            state_.bowl_r * kFrame), 0.7f);
  stamp_depth(d, disk_cells(state_.dst_cx * kFrame, state_.dst_cy * kFrame,
                            state_.bowl_r * kFrame), 0.7f);
  for (const Particle& p : state_.particles) {
    stamp_depth(d, disk_cells(p.x * kFrame, p.y * kFrame, kParticleRadius), 0.6f);
  }
  stamp_depth(d, disk_cells(state_.ee_x * kFrame, state_.ee_y * kFrame, kToolRadiusPx), 0.3f);
  return d;
}

percept::PerceptionResult Scoop2DEnv::ground_truth_perception(
    const percept::PerceptionPrompt& prompt) const {
  percept::PerceptionResult res;
  res.masks.h = kFrame;
  res.masks.w = kFrame;
  for (const std::string& term : prompt.terms()) {
    res.masks.labels.push_back(term);
    res.masks.masks.push_back(term_mask(term));
  }
  res.raw_depth = pseudo_depth();
  return res;
}

ImageU8 Scoop2DEnv::render() const {
  ImageU8 img(kFrame, kFrame, 3);
  fill_background(img, 203, 197, 186, instance_.background_seed);

  // Both bowls render identically; only particle presence tells them apart.
  for (const auto& [cx, cy] : {std::pair{state_.src_cx, state_.src_cy},
                               std::pair{state_.dst_cx, state_.dst_cy}}) {
    const auto cells = disk_cells(cx * kFrame, cy * kFrame, state_.bowl_r * kFrame);
    paint_cells(img, cells, 172, 168, 158);
    const double rim = state_.bowl_r * kFrame - 1.5;
    for (int idx : cells) {
      const double dx = idx % kFrame + 0.5 - cx * kFrame;
      const double dy = idx / kFrame + 0.5 - cy * kFrame;
      if (dx * dx + dy * dy > rim * rim) img.set_px(idx / kFrame, idx % kFrame, 92, 90, 94);
    }
  }

  for (int i = 0; i < static_cast<int>(state_.particles.size()); ++i) {
    const Particle& p = state_.particles[i];
    if (p.carried) continue;
    const Rgb c = particle_color(instance_.render_style, i);
    paint_cells(img, disk_cells(p.x * kFrame, p.y * kFrame, kParticleRadius), c.r, c.g, c.b);
  }

  const double ex = state_.ee_x * kFrame;
  const double ey = state_.ee_y * kFrame;
  const auto spoon = disk_cells(ex, ey, kToolRadiusPx);
  const uint8_t g = static_cast<uint8_t>(118 + 72 * state_.tilt);
  paint_cells(img, spoon, g, g, static_cast<uint8_t>(std::min(255, g + 8)));
  for (int idx : spoon) {
    const double dx = idx % kFrame + 0.5 - ex;
    const double dy = idx / kFrame + 0.5 - ey;
    if (dx * dx + dy * dy > 3.2 * 3.2) img.set_px(idx / kFrame, idx % kFrame, 80, 82, 88);
  }

  for (int i = 0; i < static_cast<int>(state_.particles.size()); ++i) {
    const Particle& p = state_.particles[i];
    if (!p.carried) continue;
    const Rgb c = particle_color(instance_.render_style, i);
    paint_cells(img, disk_cells(p.x * kFrame, p.y * kFrame, kParticleRadius), c.r, c.g, c.b);
  }
  return img;
}

EnvObs Scoop2DEnv::observe() const {
  return {render(), {state_.ee_x, state_.ee_y, state_.tilt}};
}

bool Scoop2DEnv::success() const { return particles_in_target() >= 3; }

double Scoop2DEnv::metric() const { return particles_in_target(); }

std::unique_ptr<Env> make_env(Task task) {
  if (task == Task::kWiping) return std::make_unique<Scrub2DEnv>();
  return std::make_unique<Scoop2DEnv>();
}

std::string default_prompt(Task task) {
  return task == Task::kWiping ? "handwriting. sponge." : "rice. bowl. spoon.";
}

}  // namespace s2diff::sim
