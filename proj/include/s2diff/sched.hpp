// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "s2diff/rng.hpp"

namespace s2diff::sched {

enum class ScheduleKind { kSquaredCosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind kind);

// Cumulative signal-retention coefficients alpha_bar[0..K], alpha_bar[0] = 1,
// strictly decreasing, alpha_bar[K] > 0.
struct NoiseSchedule {
  int steps = 0;  // K
  std::vector<double> alpha_bar;
  ScheduleKind kind = ScheduleKind::kSquaredCosine;
};

// Squared-cosine schedule with s = 0.008; per-step ratios are clipped so
// alpha_bar[k] / alpha_bar[k-1] >= 1e-3.
NoiseSchedule make_schedule(int steps, ScheduleKind kind);

// sqrt(ab_k) * a0 + sqrt(1 - ab_k) * eps, elementwise.
std::vector<double> forward_noise(const NoiseSchedule& sched, const std::vector<double>& a0, int k,
                                  const std::vector<double>& eps);

// One implicit-sampler update from step k to k_prev given the predicted clean
// sample. eta = 0 is deterministic; eta = 1 recovers ancestral sampling.
std::vector<double> ddim_step(const NoiseSchedule& sched, const std::vector<double>& a_k, int k,
                              int k_prev, const std::vector<double>& x0_pred, double eta,
                              const std::vector<double>& z);

using DenoiseFn =
    std::function<std::vector<double>(const std::vector<double>& a_k, int k)>;

// Full reverse chain: draw a^K from a standard normal, visit a uniformly
// strided descending subsequence of steps ending at 0, return a^0.
// Deterministic given (rng, eta).
std::vector<double> sample_chain(const NoiseSchedule& sched, const DenoiseFn& denoiser,
                                 size_t dim, int n_infer_steps, double eta, Rng& rng);

// The descending step sequence sample_chain visits, K first, 0 last.
std::vector<int> inference_steps(int steps, int n_infer_steps);

}  // namespace s2diff::sched
