// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "s2diff/data.hpp"
#include "s2diff/image.hpp"
#include "s2diff/nets.hpp"
#include "s2diff/rng.hpp"
#include "s2diff/sched.hpp"

namespace s2diff::policy {

// Which observation channels the policy consumes.
enum class Variant { kS2, kRgb, kSemanticOnly, kSpatialOnly };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant v);
int variant_channels(Variant v);  // s2: 2, rgb: 3, ablations: 1

// Geometric training augmentation. Samples are reflected (and for kDihedral
// also transposed) as whole state-action pairs: image planes are remapped,
// position-like observation dims are mirrored in [0, 1], and velocity-like
// action dims are negated or swapped to match. Convention: dims 0 and 1 of
// proprio and actions are the (x, y) pair; any further dims are non-spatial
// and pass through unchanged.
enum class Augment { kNone, kHFlip, kDihedral };

Augment augment_from_string(const std::string& name);
std::string to_string(Augment a);

struct PolicyConfig {
  Variant variant = Variant::kS2;
  int n_obs = 2;
  int pred_horizon = 16;
  int act_horizon = 8;
  int diffusion_steps = 100;  // K
  int n_infer_steps = 10;
  double eta = 0.0;
  int epochs = 500;
  double lr = 1e-4;
  int warmup_steps = 500;
  int batch_size = 64;
  double ema_decay = 0.995;
  double weight_decay = 1e-6;
  Augment augment = Augment::kNone;
  uint64_t seed = 0;

  // Network size knobs.
  int feature_dim = 128;
  int image_size = 64;  // multiple of 16 that divides the rendered frame
  int base_width = 32;
  nets::HeadKind head = nets::HeadKind::kGap;
  int denoiser_width1 = 64;
  int denoiser_width2 = 128;

  void validate() const;  // throws std::invalid_argument
};

std::string config_to_json(const PolicyConfig& cfg);
PolicyConfig config_from_json(const std::string& text);

// Linear warm-up to lr over warmup_steps, then cosine decay to zero across
// the remaining steps. step is 1-based.
double lr_at_step(const PolicyConfig& cfg, int step, int total_steps);

// One inference-time observation frame. Only the channels the variant uses
// need to be present; depth is raw (normalized per frame at use).
struct ObsFrame {
  ImageU8 rgb;
  GridF mask;
  GridF depth;
  std::vector<double> proprio;
};

// n_obs frames, oldest first.
struct ObsWindow {
  std::vector<ObsFrame> frames;
};

// Trained (or freshly initialized) policy: config, normalizer statistics,
// noise schedule, live parameters, and the EMA shadow used for inference.
class TrainedPolicy {
 public:
  TrainedPolicy(const PolicyConfig& cfg, int action_dim, int proprio_dim,
                const data::DatasetStats& stats);
  TrainedPolicy(TrainedPolicy&&) = default;
  TrainedPolicy& operator=(TrainedPolicy&&) = default;

  const PolicyConfig& config() const { return cfg_; }
  int action_dim() const { return action_dim_; }
  int proprio_dim() const { return proprio_dim_; }
  const data::DatasetStats& stats() const { return stats_; }
  const sched::NoiseSchedule& schedule() const { return sched_; }

  nets::ParamStore& params() { return params_; }
  const nets::ParamStore& params() const { return params_; }
  nets::PolicyNet& net() { return *net_; }
  nets::Ema& ema() { return ema_; }
  const nets::Ema& ema() const { return ema_; }

  // Copies the EMA shadow into the inference-weight store. fit and
  // load_checkpoint call this; call again after further manual training.
  void sync_inference_weights();
  nets::PolicyNet& inference_net() { return *infer_net_; }

  // Dataset provenance carried for convenience; not used by the math.
  std::string task;
  std::string prompt;

 private:
  PolicyConfig cfg_;
  int action_dim_ = 0, proprio_dim_ = 0;
  data::DatasetStats stats_;
  sched::NoiseSchedule sched_;
  nets::ParamStore params_;
  std::unique_ptr<nets::PolicyNet> net_;
  nets::ParamStore infer_params_;
  std::unique_ptr<nets::PolicyNet> infer_net_;
  nets::Ema ema_;
};

// Observation tensor [n_obs, C, S, S] for a training window; reads only the
// episode arrays the variant uses and average-pools frames down to S.
std::vector<double> build_observation(const data::Episode& ep, const std::vector<int>& obs_t,
                                      Variant variant, int image_size);

// Inference-side counterpart over perception frames.
std::vector<double> build_observation(const ObsWindow& win, Variant variant, int image_size);

// Runs gradient updates on a policy. Noise level k and noise draws are a pure
// function of (draw_key, sample identity), so batch order never changes them.
class Trainer {
 public:
  explicit Trainer(TrainedPolicy& policy);

  // One update; returns the batch MSE. Throws TrainingDivergedError on a
  // non-finite loss.
  double train_step(const data::Dataset& ds, const std::vector<data::Sample>& batch,
                    uint64_t draw_key, double lr);

  // Loss only, no parameter update.
  double eval_loss(const data::Dataset& ds, const std::vector<data::Sample>& batch,
                   uint64_t draw_key);

  int steps() const { return opt_.steps(); }

 private:
  double run(const data::Dataset& ds, const std::vector<data::Sample>& batch, uint64_t draw_key,
             double lr, bool update);

  TrainedPolicy& p_;
  nets::AdamW opt_;
};

struct FitOptions {
  std::string log_path;  // per-epoch JSONL log; empty disables
  bool verbose = false;  // mirror the log to stderr
};

// Full training loop: epochs x ceil(samples/batch) updates with warm-up plus
// cosine decay, EMA refreshed every step and selected for inference.
TrainedPolicy fit(const data::Dataset& ds, const PolicyConfig& cfg, const FitOptions& opts = {});

// Denoises a fresh action plan conditioned on the window and returns it
// denormalized, time-major [pred_horizon * action_dim]. The first act_horizon
// actions are meant to be executed before re-planning.
std::vector<double> predict_action(TrainedPolicy& p, const ObsWindow& win, Rng& rng);

// Single-file checkpoint: versioned magic, JSON configs and normalizer, then
// named shape-prefixed float32 tensors for the live and EMA weights.
void save_checkpoint(const std::string& path, const TrainedPolicy& p);
TrainedPolicy load_checkpoint(const std::string& path);

}  // namespace s2diff::policy
