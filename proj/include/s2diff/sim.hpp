// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "s2diff/image.hpp"
#include "s2diff/percept.hpp"
#include "s2diff/rng.hpp"

namespace s2diff::sim {

enum class Task { kWiping, kScooping };

Task task_from_string(const std::string& name);
std::string to_string(Task task);

// Which object category an episode runs on, and how it is drawn. The layout
// depends only on the reset seed; render_style and background_seed change the
// RGB frame but never the state, masks, or depth.
struct InstanceSpec {
  Task category = Task::kWiping;
  std::string render_style;  // wiping: red|green|black, scooping: rice|choco|hearts|mixed
  uint64_t background_seed = 0;
};

inline constexpr int kFrame = 64;          // square frame, px
inline constexpr double kDt = 0.1;         // control period, s
inline constexpr double kToolRadiusPx = 4.0;
inline constexpr int kWipingStepLimit = 150;
inline constexpr int kScoopingStepLimit = 300;
inline constexpr double kPickupRadiusPx = 5.0;
inline constexpr int kCarryCapacity = 8;
inline constexpr int kParticleCount = 50;

struct EnvObs {
  ImageU8 rgb;                   // 64x64x3
  std::vector<double> proprio;   // wiping: {x, y}; scooping: {x, y, tilt}
};

struct StepOutcome {
  EnvObs obs;
  bool done = false;
  bool success = false;
  double metric = 0.0;
  int steps = 0;
};

struct Scrub2DState {
  double ee_x = 0.5, ee_y = 0.5;          // world units in [0, 1]
  std::vector<uint8_t> scribble;          // kFrame*kFrame occupancy, row-major
  int initial_cells = 0;
  int steps = 0;
};

struct Particle {
  double x = 0.0, y = 0.0;
  bool carried = false;
  int slot = -1;  // ring slot while carried
};

struct Scoop2DState {
  double ee_x = 0.5, ee_y = 0.2, tilt = 0.4;
  std::vector<Particle> particles;
  int carried = 0;
  double src_cx = 0.0, src_cy = 0.0;
  double dst_cx = 0.0, dst_cy = 0.0;
  double bowl_r = 0.16;
  int steps = 0;
};

class Env {
 public:
  virtual ~Env() = default;

  virtual Task task() const = 0;
  virtual int action_dim() const = 0;
  virtual int proprio_dim() const = 0;
  virtual int step_limit() const = 0;

  // Seeds the layout and end-effector pose; the instance is kept for
  // rendering. Throws std::invalid_argument on a category mismatch.
  virtual EnvObs reset(const InstanceSpec& instance, uint64_t seed) = 0;

  // Velocity command, components clamped to [-1, 1] world-units/s.
  // Throws std::invalid_argument on wrong size or non-finite values.
  virtual StepOutcome step(const std::vector<double>& action) = 0;

  // Scripted demonstrator; rng supplies the action jitter.
  virtual std::vector<double> expert_action(Rng& rng) const = 0;

  virtual percept::PerceptionResult ground_truth_perception(
      const percept::PerceptionPrompt& prompt) const = 0;

  virtual EnvObs observe() const = 0;
  virtual bool success() const = 0;
  virtual double metric() const = 0;
  virtual int steps_taken() const = 0;
};

class Scrub2DEnv : public Env {
 public:
  Task task() const override { return Task::kWiping; }
  int action_dim() const override { return 2; }
  int proprio_dim() const override { return 2; }
  int step_limit() const override { return kWipingStepLimit; }

  EnvObs reset(const InstanceSpec& instance, uint64_t seed) override;
  StepOutcome step(const std::vector<double>& action) override;
  std::vector<double> expert_action(Rng& rng) const override;
  percept::PerceptionResult ground_truth_perception(
      const percept::PerceptionPrompt& prompt) const override;
  EnvObs observe() const override;
  bool success() const override;
  double metric() const override;
  int steps_taken() const override { return state_.steps; }

  const Scrub2DState& state() const { return state_; }

 private:
  ImageU8 render() const;
  GridF pseudo_depth() const;
  GridF term_mask(const std::string& term) const;

  InstanceSpec instance_;
  Scrub2DState state_;
};

class Scoop2DEnv : public Env {
 public:
  Task task() const override { return Task::kScooping; }
  int action_dim() const override { return 3; }
  int proprio_dim() const override { return 3; }
  int step_limit() const override { return kScoopingStepLimit; }

  EnvObs reset(const InstanceSpec& instance, uint64_t seed) override;
  StepOutcome step(const std::vector<double>& action) override;
  std::vector<double> expert_action(Rng& rng) const override;
  percept::PerceptionResult ground_truth_perception(
      const percept::PerceptionPrompt& prompt) const override;
  EnvObs observe() const override;
  bool success() const override;
  double metric() const override;
  int steps_taken() const override { return state_.steps; }

  const Scoop2DState& state() const { return state_; }
  int particles_in_target() const;

 private:
  ImageU8 render() const;
  GridF pseudo_depth() const;
  GridF term_mask(const std::string& term) const;
  bool in_target(const Particle& p) const;

  InstanceSpec instance_;
  Scoop2DState state_;
};

std::unique_ptr<Env> make_env(Task task);

// Prompt used when recording demos and running policies on a task.
std::string default_prompt(Task task);

}  // namespace s2diff::sim
