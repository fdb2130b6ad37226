// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/sched.hpp"

#include <cmath>
#include <stdexcept>

#include "s2diff/errors.hpp"

namespace s2diff::sched {

namespace {
constexpr double kCosineOffset = 0.008;
constexpr double kMinStepRatio = 1e-3;

double cosine_f(int k, int steps) {
  const double t = (static_cast<double>(k) / steps + kCosineOffset) / (1.0 + kCosineOffset);
  const double c = std::cos(t * M_PI / 2.0);
  return c * c;
}
}  // namespace

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "squared-cosine") return ScheduleKind::kSquaredCosine;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind) { return "squared-cosine"; }

NoiseSchedule make_schedule(int steps, ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("make_schedule: steps must be >= 1");
  if (kind != ScheduleKind::kSquaredCosine) throw std::invalid_argument("make_schedule: unknown kind");

  NoiseSchedule sched;
  sched.steps = steps;
  sched.kind = kind;
  sched.alpha_bar.resize(steps + 1);
  sched.alpha_bar[0] = 1.0;
  for (int k = 1; k <= steps; ++k) {
    double ratio = cosine_f(k, steps) / cosine_f(k - 1, steps);
    if (ratio < kMinStepRatio) ratio = kMinStepRatio;
    sched.alpha_bar[k] = sched.alpha_bar[k - 1] * ratio;
  }
  return sched;
}

namespace {
void check_step(const NoiseSchedule& sched, int k) {
  if (k < 0 || k > sched.steps) throw std::invalid_argument("step index out of range");
}
}  // namespace

std::vector<double> forward_noise(const NoiseSchedule& sched, const std::vector<double>& a0, int k,
                                  const std::vector<double>& eps) {
  check_step(sched, k);
  if (a0.size() != eps.size()) throw std::invalid_argument("forward_noise: shape mismatch");
  const double ab = sched.alpha_bar[k];
  const double sa = std::sqrt(ab);
  const double sb = std::sqrt(1.0 - ab);
  std::vector<double> out(a0.size());
  for (size_t i = 0; i < a0.size(); ++i) out[i] = sa * a0[i] + sb * eps[i];
  return out;
}

std::vector<double> ddim_step(const NoiseSchedule& sched, const std::vector<double>& a_k, int k,
                              int k_prev, const std::vector<double>& x0_pred, double eta,
                              const std::vector<double>& z) {
  check_step(sched, k);
  if (k_prev >= k || k_prev < 0) throw std::invalid_argument("ddim_step: require 0 <= k_prev < k");
  if (a_k.size() != x0_pred.size()) throw std::invalid_argument("ddim_step: shape mismatch");
  if (eta != 0.0 && z.size() != a_k.size()) {
    throw std::invalid_argument("ddim_step: noise shape mismatch");
  }
  const double ab_k = sched.alpha_bar[k];
  const double ab_p = sched.alpha_bar[k_prev];
  const double sqrt_one_minus_ab_k = std::sqrt(1.0 - ab_k);

  const double sigma =
      eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_k)) * std::sqrt(1.0 - ab_k / ab_p);
  double dir_coef_sq = 1.0 - ab_p - sigma * sigma;
  if (dir_coef_sq < 0.0) dir_coef_sq = 0.0;  // guard tiny negative round-off
  const double dir_coef = std::sqrt(dir_coef_sq);
  const double sqrt_ab_p = std::sqrt(ab_p);
  const double sqrt_ab_k = std::sqrt(ab_k);

  std::vector<double> out(a_k.size());
  for (size_t i = 0; i < a_k.size(); ++i) {
    const double eps_hat = (a_k[i] - sqrt_ab_k * x0_pred[i]) / sqrt_one_minus_ab_k;
    out[i] = sqrt_ab_p * x0_pred[i] + dir_coef * eps_hat;
    if (eta != 0.0) out[i] += sigma * z[i];
  }
  return out;
}

std::vector<int> inference_steps(int steps, int n_infer_steps) {
  if (n_infer_steps < 1 || n_infer_steps > steps) {
    throw std::invalid_argument("inference_steps: require 1 <= n_infer_steps <= K");
  }
  std::vector<int> ks(n_infer_steps + 1);
  for (int j = 0; j <= n_infer_steps; ++j) {
    ks[j] = static_cast<int>(
        std::llround(static_cast<double>(steps) * (n_infer_steps - j) / n_infer_steps));
  }
  return ks;  // strictly decreasing because the stride is >= 1
}

std::vector<double> sample_chain(const NoiseSchedule& sched, const DenoiseFn& denoiser,
                                 size_t dim, int n_infer_steps, double eta, Rng& rng) {
  const std::vector<int> ks = inference_steps(sched.steps, n_infer_steps);

  std::vector<double> a(dim);
  for (size_t i = 0; i < dim; ++i) a[i] = rng.normal();

  std::vector<double> z(dim, 0.0);
  for (size_t j = 0; j + 1 < ks.size(); ++j) {
    const int k = ks[j];
    const int k_prev = ks[j + 1];
    std::vector<double> x0 = denoiser(a, k);
    if (x0.size() != dim) throw ContractViolation("sample_chain: denoiser returned wrong shape");
    if (eta > 0.0) {
      for (size_t i = 0; i < dim; ++i) z[i] = rng.normal();
    }
    a = ddim_step(sched, a, k, k_prev, x0, eta, z);
  }
  return a;
}

}  // namespace s2diff::sched
