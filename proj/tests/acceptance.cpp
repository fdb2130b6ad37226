// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance gate. Each criterion prints one PASS/FAIL line; the
// process exits nonzero if any criterion fails. Pass criterion ids (C1..C9)
// as arguments to run a subset.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "s2diff/data.hpp"
#include "s2diff/evalstats.hpp"
#include "s2diff/fusion.hpp"
#include "s2diff/image.hpp"
#include "s2diff/nets.hpp"
#include "s2diff/percept.hpp"
#include "s2diff/policy.hpp"
#include "s2diff/rng.hpp"
#include "s2diff/sched.hpp"
#include "s2diff/sim.hpp"

namespace fs = std::filesystem;
using namespace s2diff;

namespace {

// Pinned tolerances and budgets.
constexpr double kSchedTol = 1e-5;          // C2: constant-denoiser fixed point
constexpr double kFusionTol = 1e-6;         // C3: affine invariance of depth
constexpr double kGradRelTol = 1e-3;        // C4: analytic vs finite difference
constexpr double kOverfitTarget = 1e-3;     // C5: repeated-batch MSE
constexpr int kOverfitMaxSteps = 2000;      // C5
constexpr double kHighBar = 0.7;            // C6: required success on-category
constexpr double kLowBar = 0.3;             // C6: rgb ceiling off-instance
constexpr int kEvalTrials = 20;             // C6/C7 rollouts per cell
constexpr double kPixelTol = 1.0 / 255.0;   // C9: wire round-trip error

struct Outcome {
  std::string id;
  std::string name;
  bool pass = false;
  double seconds = 0.0;
  std::string detail;
};

struct Scratch {
  fs::path root;
  Scratch() {
    root = fs::temp_directory_path() / ("s2diff_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(root);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

Scratch& scratch() {
  static Scratch s;
  return s;
}

std::string format2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

// ---------------------------------------------------------------- criterion 1

bool c1_wilson(std::string& detail) {
  const struct {
    int succ, n;
    const char* lo;
    const char* hi;
  } cases[] = {{75, 100, "0.66", "0.82"}, {88, 100, "0.80", "0.93"}};
  std::ostringstream out;
  bool ok = true;
  for (const auto& c : cases) {
    auto [lo, hi] = evalstats::wilson_ci(c.succ, c.n);
    const std::string got_lo = format2(lo), got_hi = format2(hi);
    ok = ok && got_lo == c.lo && got_hi == c.hi;
    out << c.succ << "/" << c.n << " -> [" << got_lo << ", " << got_hi << "] ";
  }
  detail = out.str();
  return ok;
}

// ---------------------------------------------------------------- criterion 2

bool c2_scheduler(std::string& detail) {
  double worst = 0.0;
  Rng rng(2024);
  for (int steps : {10, 100}) {
    const sched::NoiseSchedule sch = sched::make_schedule(steps, sched::ScheduleKind::kSquaredCosine);
    std::vector<double> target(8);
    for (auto& v : target) v = rng.uniform(-1.0, 1.0);
    const sched::DenoiseFn constant = [&target](const std::vector<double>&, int) {
      return target;
    };
    for (int n_infer : {5, 10, steps}) {
      for (double eta : {0.0, 1.0}) {
        const std::vector<double> out =
            sched::sample_chain(sch, constant, target.size(), n_infer, eta, rng);
        for (size_t i = 0; i < target.size(); ++i)
          worst = std::max(worst, std::abs(out[i] - target[i]));
      }
    }
  }
  std::ostringstream out;
  out << "max deviation " << worst << " (tol " << kSchedTol << ")";
  detail = out.str();
  return worst <= kSchedTol;
}

// ---------------------------------------------------------------- criterion 3

GridF random_grid(Rng& rng, int h, int w, double lo, double hi) {
  GridF g;
  g.h = h;
  g.w = w;
  g.v.resize(static_cast<size_t>(h) * w);
  for (auto& v : g.v) v = static_cast<float>(rng.uniform(lo, hi));
  return g;
}

bool c3_fusion(std::string& detail) {
  Rng rng(7);
  const int h = 16, w = 16;

  // Max-pool fusion: commutative, idempotent, monotone. Exact.
  for (int rep = 0; rep < 20; ++rep) {
    fusion::SemanticMaskSet ab, ba;
    ab.h = ba.h = h;
    ab.w = ba.w = w;
    const GridF a = random_grid(rng, h, w, 0.0, 1.0), b = random_grid(rng, h, w, 0.0, 1.0);
    ab.labels = {"a", "b"};
    ab.masks = {a, b};
    ba.labels = {"b", "a"};
    ba.masks = {b, a};
    const auto fab = fusion::fuse_masks(ab).values, fba = fusion::fuse_masks(ba).values;
    if (fab.v != fba.v) {
      detail = "fusion is order dependent";
      return false;
    }

    fusion::SemanticMaskSet twice = ab;
    twice.labels.push_back("a2");
    twice.masks.push_back(a);
    if (fusion::fuse_masks(twice).values.v != fab.v) {
      detail = "fusion is not idempotent";
      return false;
    }

    fusion::SemanticMaskSet solo;
    solo.h = h;
    solo.w = w;
    solo.labels = {"a"};
    solo.masks = {a};
    const auto fa = fusion::fuse_masks(solo).values;
    for (size_t i = 0; i < fab.v.size(); ++i) {
      if (fab.v[i] < fa.v[i]) {
        detail = "fusion is not monotone in the mask set";
        return false;
      }
    }
  }

  // Depth normalization: invariant to positive affine maps of the raw input.
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const GridF raw = random_grid(rng, h, w, -4.0, 9.0);
    const double scale = rng.uniform(0.1, 10.0), shift = rng.uniform(-5.0, 5.0);
    GridF affine = raw;
    for (auto& v : affine.v) v = static_cast<float>(scale * v + shift);
    const auto n1 = fusion::normalize_depth(raw).values, n2 = fusion::normalize_depth(affine).values;
    for (size_t i = 0; i < n1.v.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(n1.v[i] - n2.v[i])));
  }
  std::ostringstream out;
  out << "affine deviation " << worst << " (tol " << kFusionTol << ")";
  detail = out.str();
  return worst <= kFusionTol;
}

// ---------------------------------------------------------------- criterion 4

bool c4_gradients(std::string& detail) {
  nets::DenoiserConfig cfg;
  cfg.action_dim = 2;
  cfg.horizon = 4;
  cfg.cond_dim = 6;
  cfg.width1 = 4;
  cfg.width2 = 8;

  nets::ParamStore store;
  Rng init(99);
  nets::Denoiser1D den(store, "d", cfg, init);

  const int n = 2;
  Rng data_rng(123);
  std::vector<double> a(static_cast<size_t>(n) * cfg.action_dim * cfg.horizon);
  std::vector<double> cond(static_cast<size_t>(n) * cfg.cond_dim);
  for (auto& v : a) v = data_rng.uniform(-1.0, 1.0);
  for (auto& v : cond) v = data_rng.uniform(-1.0, 1.0);
  std::vector<double> probe(a.size());
  for (auto& v : probe) v = data_rng.uniform(-1.0, 1.0);

  const auto loss = [&]() {
    const std::vector<double> y = den.forward(a, cond, n);
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += probe[i] * y[i];
    return acc;
  };

  // Analytic gradients of the probe loss.
  loss();
  store.zero_grads();
  den.backward(probe);

  // Sweep >= 20 random parameters across every tensor.
  std::vector<std::string> names;
  for (const auto& [name, param] : store.all()) names.push_back(name);
  std::vector<std::pair<std::string, size_t>> picks;
  Rng pick_rng(55);
  for (const auto& name : names) {
    const size_t size = store.at(name).w.size();
    picks.emplace_back(name, static_cast<size_t>(pick_rng.uniform_int(0, size - 1)));
  }
  while (picks.size() < 20) {
    const auto& name = names[pick_rng.uniform_int(0, names.size() - 1)];
    const size_t size = store.at(name).w.size();
    picks.emplace_back(name, static_cast<size_t>(pick_rng.uniform_int(0, size - 1)));
  }

  const double h = 1e-4;
  double worst = 0.0;
  for (const auto& [name, idx] : picks) {
    nets::Param& p = store.at(name);
    const double saved = p.w[idx];
    p.w[idx] = saved + h;
    const double lp = loss();
    p.w[idx] = saved - h;
    const double lm = loss();
    p.w[idx] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double an = p.g[idx];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
    worst = std::max(worst, rel);
  }
  std::ostringstream out;
  out << picks.size() << " params, worst rel err " << worst << " (tol " << kGradRelTol << ")";
  detail = out.str();
  return worst <= kGradRelTol;
}

// ---------------------------------------------------------------- criterion 5

policy::PolicyConfig tiny_profile(policy::Variant v) {
  policy::PolicyConfig cfg;
  cfg.variant = v;
  cfg.n_obs = 2;
  cfg.pred_horizon = 4;
  cfg.act_horizon = 2;
  cfg.diffusion_steps = 10;
  cfg.n_infer_steps = 4;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 10;
  cfg.batch_size = 4;
  cfg.feature_dim = 8;
  cfg.image_size = 16;
  cfg.base_width = 2;
  cfg.denoiser_width1 = 4;
  cfg.denoiser_width2 = 8;
  cfg.seed = 5;
  return cfg;
}

bool c5_overfit(std::string& detail) {
  const fs::path dir = scratch().root / "c5_demos";
  data::RecordOptions ro;
  ro.instance.category = sim::Task::kWiping;
  ro.instance.render_style = "red";
  ro.episodes = 2;
  ro.seed = 40;
  ro.out_dir = dir.string();
  data::record_demos(ro);
  const data::Dataset ds = data::load_dataset(dir.string());

  const policy::PolicyConfig cfg = tiny_profile(policy::Variant::kS2);
  policy::TrainedPolicy p(cfg, ds.manifest.action_dim, ds.manifest.proprio_dim,
                          ds.manifest.stats);
  policy::Trainer trainer(p);

  // One fixed batch, one fixed draw key: targets never change between steps.
  std::vector<data::Sample> batch;
  for (int i = 0; i < cfg.batch_size; ++i)
    batch.push_back(data::make_sample(ds, 0, i, cfg.n_obs, cfg.pred_horizon));
  const uint64_t draw_key = 77;

  double loss = trainer.eval_loss(ds, batch, draw_key);
  const double initial = loss;
  int step = 0;
  for (; step < kOverfitMaxSteps && loss >= kOverfitTarget; ++step) {
    trainer.train_step(ds, batch, draw_key, 1e-3);
    loss = trainer.eval_loss(ds, batch, draw_key);
  }
  std::ostringstream out;
  out << "mse " << initial << " -> " << loss << " after " << step << " steps (target "
      << kOverfitTarget << ")";
  detail = out.str();
  return loss < kOverfitTarget;
}

// ------------------------------------------------------- criteria 6, 7 and 8

// Training profile used by the generalization and ablation criteria: small
// enough for a CPU budget, big enough to clear the success bars.
policy::PolicyConfig acceptance_profile(policy::Variant v, int epochs) {
  policy::PolicyConfig cfg;
  cfg.variant = v;
  cfg.n_obs = 2;
  cfg.pred_horizon = 16;
  cfg.act_horizon = 8;
  cfg.diffusion_steps = 100;
  cfg.n_infer_steps = 10;
  cfg.eta = 0.0;
  cfg.epochs = epochs;
  cfg.lr = 3e-4;
  cfg.warmup_steps = 500;
  cfg.batch_size = 64;
  cfg.ema_decay = 0.995;
  cfg.weight_decay = 1e-6;
  cfg.seed = 1;
  cfg.feature_dim = 64;
  cfg.image_size = 32;
  cfg.base_width = 4;
  cfg.head = nets::HeadKind::kGap;
  cfg.denoiser_width1 = 16;
  cfg.denoiser_width2 = 32;
  return cfg;
}

sim::InstanceSpec wiping_instance(const std::string& style) {
  sim::InstanceSpec inst;
  inst.category = sim::Task::kWiping;
  inst.render_style = style;
  inst.background_seed = 0;
  return inst;
}

sim::InstanceSpec scooping_instance(const std::string& style) {
  sim::InstanceSpec inst;
  inst.category = sim::Task::kScooping;
  inst.render_style = style;
  inst.background_seed = 0;
  return inst;
}

constexpr int kWipingEpochs = 350;
constexpr int kScoopingEpochs = 60;
constexpr uint64_t kEvalSeedBase = 1000;

struct GeneralizationCounts {
  int s2_red = 0, s2_green = 0, rgb_red = 0, rgb_green = 0;
  std::pair<double, double> s2_green_ci, rgb_green_ci;
};

// Record demos on red, train rgb and s2 with identical seeds, evaluate both
// on the training instance and the unseen green instance.
GeneralizationCounts run_generalization_pipeline(const std::string& tag) {
  const fs::path dir = scratch().root / ("c6_demos_" + tag);
  data::RecordOptions ro;
  ro.instance = wiping_instance("red");
  ro.episodes = 40;
  ro.seed = 0;
  ro.out_dir = dir.string();
  data::record_demos(ro);
  const data::Dataset ds = data::load_dataset(dir.string());

  GeneralizationCounts counts;
  for (const auto v : {policy::Variant::kS2, policy::Variant::kRgb}) {
    policy::TrainedPolicy p =
        policy::fit(ds, acceptance_profile(v, kWipingEpochs));
    const evalstats::EvalResult red =
        evalstats::run_rollouts(p, wiping_instance("red"), kEvalTrials, kEvalSeedBase);
    const evalstats::EvalResult green =
        evalstats::run_rollouts(p, wiping_instance("green"), kEvalTrials, kEvalSeedBase);
    if (v == policy::Variant::kS2) {
      counts.s2_red = red.successes;
      counts.s2_green = green.successes;
      counts.s2_green_ci = {green.ci_low, green.ci_high};
    } else {
      counts.rgb_red = red.successes;
      counts.rgb_green = green.successes;
      counts.rgb_green_ci = {green.ci_low, green.ci_high};
    }
  }
  return counts;
}

std::string counts_to_string(const GeneralizationCounts& c) {
  std::ostringstream out;
  out << "s2 " << c.s2_red << "/" << kEvalTrials << " red, " << c.s2_green << "/" << kEvalTrials
      << " green; rgb " << c.rgb_red << "/" << kEvalTrials << " red, " << c.rgb_green << "/"
      << kEvalTrials << " green";
  return out.str();
}

bool c6_generalization(std::string& detail, GeneralizationCounts& saved, bool& saved_valid) {
  const GeneralizationCounts c = run_generalization_pipeline("first");
  saved = c;
  saved_valid = true;

  const double bar_hi = kHighBar * kEvalTrials, bar_lo = kLowBar * kEvalTrials;
  const bool s2_ok = c.s2_red >= bar_hi && c.s2_green >= bar_hi;
  const bool rgb_ok = c.rgb_red >= bar_hi && c.rgb_green <= bar_lo;
  const bool ci_separated = c.s2_green_ci.first > c.rgb_green_ci.second ||
                            c.rgb_green_ci.first > c.s2_green_ci.second;
  std::ostringstream out;
  out << counts_to_string(c) << "; green CIs s2 [" << format2(c.s2_green_ci.first) << ", "
      << format2(c.s2_green_ci.second) << "] vs rgb [" << format2(c.rgb_green_ci.first) << ", "
      << format2(c.rgb_green_ci.second) << "]";
  detail = out.str();
  return s2_ok && rgb_ok && ci_separated;
}

bool c7_ablation(std::string& detail) {
  const fs::path dir = scratch().root / "c7_demos";
  data::RecordOptions ro;
  ro.instance = scooping_instance("rice");
  ro.episodes = 60;
  ro.seed = 0;
  ro.out_dir = dir.string();
  data::record_demos(ro);
  const data::Dataset ds = data::load_dataset(dir.string());

  evalstats::AblationOptions opts;
  opts.base = acceptance_profile(policy::Variant::kS2, kScoopingEpochs);
  opts.variants = {policy::Variant::kS2, policy::Variant::kSemanticOnly,
                   policy::Variant::kSpatialOnly};
  opts.n_trials = kEvalTrials;
  opts.eval_seed_base = kEvalSeedBase;

  // The unseen instance only; the matrix is 3 variants x 1 instance.
  const std::vector<evalstats::EvalResult> results =
      evalstats::ablation_run(ds, {scooping_instance("hearts")}, opts);
  const evalstats::EvalResult &s2 = results[0], &sem = results[1], &spa = results[2];

  const fs::path report_dir = scratch().root / "c7_report";
  evalstats::emit_report(results, report_dir.string());
  const bool report_ok = fs::exists(report_dir / "results.txt") &&
                         fs::exists(report_dir / "results.csv") &&
                         fs::exists(report_dir / "chart_scooping.png");

  std::ostringstream out;
  out << "unseen hearts: s2 " << s2.successes << ", semantic-only " << sem.successes
      << ", spatial-only " << spa.successes << " of " << kEvalTrials
      << (report_ok ? "; report emitted" : "; report missing");
  detail = out.str();
  return s2.successes >= sem.successes && s2.successes >= spa.successes && report_ok;
}

bool c8_determinism(std::string& detail, const GeneralizationCounts& first, bool first_valid) {
  const GeneralizationCounts a =
      first_valid ? first : run_generalization_pipeline("first");
  const GeneralizationCounts b = run_generalization_pipeline("second");
  const bool ok = a.s2_red == b.s2_red && a.s2_green == b.s2_green && a.rgb_red == b.rgb_red &&
                  a.rgb_green == b.rgb_green;
  std::ostringstream out;
  out << "run 1: " << counts_to_string(a) << " | run 2: " << counts_to_string(b);
  detail = out.str();
  return ok;
}

// ---------------------------------------------------------------- criterion 9

bool c9_protocol(std::string& detail) {
  Rng rng(31415);
  percept::MockPerceptionServer::Fixture fixture;
  fixture.masks.h = 64;
  fixture.masks.w = 64;
  fixture.masks.labels = {"handwriting", "sponge"};
  fixture.masks.masks = {random_grid(rng, 64, 64, 0.0, 1.0), random_grid(rng, 64, 64, 0.0, 1.0)};
  fixture.depth = random_grid(rng, 64, 64, 0.0, 1.0);

  percept::MockPerceptionServer server;
  server.set_fixture(fixture);
  server.start(0);

  percept::RemoteConfig rc;
  rc.base_url = server.url();
  rc.max_attempts = 3;
  rc.backoff_s = 0.05;
  percept::RemoteBackend backend(rc);

  ImageU8 frame;
  frame.h = 64;
  frame.w = 64;
  frame.c = 3;
  frame.data.resize(64 * 64 * 3);
  for (auto& b : frame.data) b = static_cast<uint8_t>(rng.next_u64() & 0xff);
  const percept::PerceptionPrompt prompt = percept::PerceptionPrompt::parse("handwriting. sponge.");

  const percept::PerceptionResult res = backend.perceive(frame, prompt);
  double worst = 0.0;
  bool shape_ok = res.masks.masks.size() == fixture.masks.masks.size();
  for (size_t m = 0; shape_ok && m < res.masks.masks.size(); ++m) {
    const auto& got = res.masks.masks[m].v;
    const auto& want = fixture.masks.masks[m].v;
    shape_ok = got.size() == want.size();
    for (size_t i = 0; shape_ok && i < got.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(got[i] - want[i])));
  }
  if (shape_ok && res.raw_depth.v.size() == fixture.depth.v.size()) {
    for (size_t i = 0; i < fixture.depth.v.size(); ++i)
      worst = std::max(
          worst, static_cast<double>(std::abs(res.raw_depth.v[i] - fixture.depth.v[i])));
  } else {
    shape_ok = false;
  }

  // Retries: two injected 5xx responses must be absorbed by backoff.
  server.fail_next(2);
  for (auto& b : frame.data) b = static_cast<uint8_t>(rng.next_u64() & 0xff);  // bypass cache
  const int before = server.segment_requests();
  bool retry_ok = true;
  try {
    backend.perceive(frame, prompt);
  } catch (const std::exception&) {
    retry_ok = false;
  }
  const int attempts = server.segment_requests() - before;
  retry_ok = retry_ok && attempts >= 3;
  server.stop();

  std::ostringstream out;
  out << "round-trip err " << worst << " (tol " << kPixelTol << "), " << attempts
      << " attempts under injected 5xx";
  detail = out.str();
  return shape_ok && worst <= kPixelTol && retry_ok;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) only.insert(argv[i]);
  const auto wanted = [&only](const std::string& id) { return only.empty() || only.count(id); };

  GeneralizationCounts c6_counts;
  bool c6_counts_valid = false;

  struct Entry {
    std::string id;
    std::string name;
    double budget_s;
    std::function<bool(std::string&)> fn;
  };
  const std::vector<Entry> entries = {
      {"C1", "wilson interval exactness", 1.0, c1_wilson},
      {"C2", "scheduler fixed point on a constant denoiser", 10.0, c2_scheduler},
      {"C3", "mask fusion and depth normalization algebra", 10.0, c3_fusion},
      {"C4", "denoiser analytic vs finite-difference gradients", 120.0, c4_gradients},
      {"C5", "repeated-batch overfit reaches near-zero mse", 300.0, c5_overfit},
      {"C6", "instance-to-category generalization split", 14400.0,
       [&](std::string& d) { return c6_generalization(d, c6_counts, c6_counts_valid); }},
      {"C7", "observation ablation ordering on unseen scooping", 14400.0, c7_ablation},
      {"C8", "pipeline determinism across identical reruns", 14400.0,
       [&](std::string& d) { return c8_determinism(d, c6_counts, c6_counts_valid); }},
      {"C9", "perception wire protocol round-trip and retries", 30.0, c9_protocol},
  };

  std::vector<Outcome> outcomes;
  for (const auto& e : entries) {
    if (!wanted(e.id)) continue;
    Outcome o;
    o.id = e.id;
    o.name = e.name;
    const auto start = std::chrono::steady_clock::now();
    try {
      o.pass = e.fn(o.detail);
    } catch (const std::exception& ex) {
      o.pass = false;
      o.detail = std::string("exception: ") + ex.what();
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.seconds > e.budget_s) {
      o.pass = false;
      o.detail += " [over budget " + std::to_string(e.budget_s) + "s]";
    }
    std::printf("%s %-52s %s  (%.1fs)  %s\n", o.id.c_str(), o.name.c_str(),
                o.pass ? "PASS" : "FAIL", o.seconds, o.detail.c_str());
    std::fflush(stdout);
    outcomes.push_back(o);
  }

  int passed = 0;
  for (const auto& o : outcomes) passed += o.pass ? 1 : 0;
  std::printf("acceptance: %d/%zu criteria passed\n", passed, outcomes.size());
  return passed == static_cast<int>(outcomes.size()) ? 0 : 1;
}
