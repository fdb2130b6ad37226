// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s2diff/rng.hpp"
#include "s2diff/sim.hpp"

namespace s2diff::data {

// One demonstration trajectory. Arrays are time-major; rgb is HWC uint8 and
// the rest are float32. gt_depth holds the raw pseudo-depth before
// normalization; gt_mask holds the fused prompt mask.
struct Episode {
  int steps = 0;
  int proprio_dim = 0;
  int action_dim = 0;
  std::vector<uint8_t> rgb;      // steps * 64 * 64 * 3
  std::vector<float> gt_mask;    // steps * 64 * 64
  std::vector<float> gt_depth;   // steps * 64 * 64
  std::vector<float> proprio;    // steps * proprio_dim
  std::vector<float> action;     // steps * action_dim
};

void save_episode(const std::string& path, const Episode& ep);
Episode load_episode(const std::string& path);

// Per-dimension ranges used to map actions and proprio to [-1, 1].
struct DatasetStats {
  std::vector<float> action_min, action_max;
  std::vector<float> proprio_min, proprio_max;
};

double normalize_value(double v, double lo, double hi);
double denormalize_value(double u, double lo, double hi);

struct EpisodeRef {
  std::string file;
  uint64_t seed = 0;
  int steps = 0;
};

struct Manifest {
  int format_version = 1;
  std::string task;
  std::string prompt;
  std::string render_style;
  uint64_t background_seed = 0;
  int action_dim = 0;
  int proprio_dim = 0;
  std::vector<EpisodeRef> episodes;
  DatasetStats stats;
};

struct Dataset {
  Manifest manifest;
  std::vector<Episode> episodes;
};

struct RecordOptions {
  sim::InstanceSpec instance;
  int episodes = 40;
  uint64_t seed = 0;            // episode i tries seed + i
  std::string prompt;           // empty -> task default
  std::string out_dir;
  int step_limit_override = 0;  // >0 truncates episodes early (testing aid)
};

// Runs the scripted expert, keeps successful episodes, and writes them with a
// manifest. Throws EnvMisconfiguredError when more than half the attempts
// fail.
Manifest record_demos(const RecordOptions& opts);

Dataset load_dataset(const std::string& dir);

// One training window: observation frames ending at t (clamped at the
// episode start) and an action chunk from t padded past the episode end.
struct Sample {
  int episode = 0;
  int t = 0;
  std::vector<int> obs_t;             // n_obs frame indices, ascending
  std::vector<double> action_chunk;   // pred_horizon * action_dim, in [-1, 1]
  std::vector<uint8_t> padded;        // pred_horizon flags, 1 = repeated last
};

Sample make_sample(const Dataset& ds, int episode, int t, int n_obs, int pred_horizon);

std::vector<Sample> sample_batch(const Dataset& ds, int batch_size, int n_obs,
                                 int pred_horizon, Rng& rng);

}  // namespace s2diff::data
