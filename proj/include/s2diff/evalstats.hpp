// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "s2diff/data.hpp"
#include "s2diff/percept.hpp"
#include "s2diff/policy.hpp"
#include "s2diff/sim.hpp"

namespace s2diff::evalstats {

// Wilson score interval (low, high) for a binomial proportion, clipped to
// [0, 1]. Throws std::invalid_argument when n <= 0 or successes is outside
// [0, n].
std::pair<double, double> wilson_ci(int successes, int n, double z = 1.96);

struct TrialLog {
  uint64_t seed = 0;
  bool success = false;
  int steps = 0;
  double metric = 0.0;
  bool perception_failed = false;
};

struct EvalResult {
  std::string task;
  std::string instance;   // render style label
  std::string variant;
  int n_trials = 0;
  int successes = 0;
  double success_rate = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::vector<TrialLog> trials;
};

std::string to_json(const EvalResult& result);
EvalResult eval_result_from_json(const std::string& text);

// Plans a flat time-major action sequence (length divisible by the env action
// dim) from the current env state. The rollout loop executes up to act_horizon
// of the planned actions before replanning.
using Controller = std::function<std::vector<double>(sim::Env&, Rng&)>;

// Runs n_trials episodes of `controller` on the given instance. Trial i resets
// the env with seed_base + i; its per-trial Rng also derives from that seed so
// trials are independent of execution order.
EvalResult run_rollouts_controller(const Controller& controller, int act_horizon,
                                   const sim::InstanceSpec& instance, int n_trials,
                                   uint64_t seed_base, const std::string& variant_label);

// Receding-horizon rollouts of a trained policy. A null backend selects the
// per-trial ground-truth oracle; otherwise every frame is perceived through
// `backend`. A perception error (transport or protocol) aborts the trial,
// which is counted as a failure and flagged in its TrialLog.
EvalResult run_rollouts(policy::TrainedPolicy& p, const sim::InstanceSpec& instance,
                        int n_trials, uint64_t seed_base,
                        percept::Backend* backend = nullptr);

struct AblationOptions {
  policy::PolicyConfig base;  // variant field is overridden per run
  std::vector<policy::Variant> variants = {
      policy::Variant::kS2, policy::Variant::kRgb, policy::Variant::kSemanticOnly,
      policy::Variant::kSpatialOnly};
  int n_trials = 20;
  uint64_t eval_seed_base = 1000;
  percept::Backend* backend = nullptr;  // null selects the oracle
  std::string log_dir;                  // training logs per variant; empty disables
  bool verbose = false;
};

// Trains one policy per variant on the dataset, then evaluates every variant
// on every instance with a shared seed base. Returns the matrix row-major:
// results[v * instances.size() + i].
std::vector<EvalResult> ablation_run(const data::Dataset& ds,
                                     const std::vector<sim::InstanceSpec>& instances,
                                     const AblationOptions& opts);

// Writes results.txt (aligned table, rates as "0.75 [0.66, 0.82]"),
// results.csv, and one bar chart PNG per task with CI whiskers into out_dir
// (created if needed). Throws std::invalid_argument on an empty result set.
void emit_report(const std::vector<EvalResult>& results, const std::string& out_dir);

}  // namespace s2diff::evalstats
