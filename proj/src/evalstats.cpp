// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/evalstats.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "s2diff/errors.hpp"
#include "s2diff/fusion.hpp"
#include "s2diff/image.hpp"
#include "s2diff/rng.hpp"

namespace s2diff::evalstats {

namespace {

constexpr uint64_t kTrialSalt = 0xe7a10f5d;

using nlohmann::json;

void finalize(EvalResult& r) {
  r.n_trials = static_cast<int>(r.trials.size());
  r.successes = 0;
  for (const auto& t : r.trials) r.successes += t.success ? 1 : 0;
  r.success_rate = r.n_trials > 0 ? static_cast<double>(r.successes) / r.n_trials : 0.0;
  if (r.n_trials > 0) {
    auto [lo, hi] = wilson_ci(r.successes, r.n_trials);
    r.ci_low = lo;
    r.ci_high = hi;
  }
}

}  // namespace

std::pair<double, double> wilson_ci(int successes, int n, double z) {
  if (n <= 0) throw std::invalid_argument("wilson_ci: n must be positive");
  if (successes < 0 || successes > n)
    throw std::invalid_argument("wilson_ci: successes outside [0, n]");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {std::clamp(center - half, 0.0, 1.0), std::clamp(center + half, 0.0, 1.0)};
}

std::string to_json(const EvalResult& r) {
  json trials = json::array();
  for (const auto& t : r.trials) {
    trials.push_back({{"seed", t.seed},
                      {"success", t.success},
                      {"steps", t.steps},
                      {"metric", t.metric},
                      {"perception_failed", t.perception_failed}});
  }
  json j = {{"task", r.task},
            {"instance", r.instance},
            {"variant", r.variant},
            {"n_trials", r.n_trials},
            {"successes", r.successes},
            {"success_rate", r.success_rate},
            {"ci_low", r.ci_low},
            {"ci_high", r.ci_high},
            {"trials", trials}};
  return j.dump(2);
}

EvalResult eval_result_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("eval result: bad json: ") + e.what());
  }
  try {
    EvalResult r;
    r.task = j.at("task").get<std::string>();
    r.instance = j.at("instance").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.n_trials = j.at("n_trials").get<int>();
    r.successes = j.at("successes").get<int>();
    r.success_rate = j.at("success_rate").get<double>();
    r.ci_low = j.at("ci_low").get<double>();
    r.ci_high = j.at("ci_high").get<double>();
    for (const auto& tj : j.at("trials")) {
      TrialLog t;
      t.seed = tj.at("seed").get<uint64_t>();
      t.success = tj.at("success").get<bool>();
      t.steps = tj.at("steps").get<int>();
      t.metric = tj.at("metric").get<double>();
      t.perception_failed = tj.at("perception_failed").get<bool>();
      r.trials.push_back(t);
    }
    return r;
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("eval result: missing field: ") + e.what());
  }
}

EvalResult run_rollouts_controller(const Controller& controller, int act_horizon,
                                   const sim::InstanceSpec& instance, int n_trials,
                                   uint64_t seed_base, const std::string& variant_label) {
  if (n_trials <= 0) throw std::invalid_argument("run_rollouts: n_trials must be positive");
  if (act_horizon <= 0) throw std::invalid_argument("run_rollouts: act_horizon must be positive");
  EvalResult result;
  result.task = sim::to_string(instance.category);
  result.instance = instance.render_style;
  result.variant = variant_label;
  for (int i = 0; i < n_trials; ++i) {
    const uint64_t seed = seed_base + static_cast<uint64_t>(i);
    auto env = sim::make_env(instance.category);
    env->reset(instance, seed);
    Rng rng(mix_seed(seed, kTrialSalt));
    const int dim = env->action_dim();
    bool done = false;
    while (!done) {
      const std::vector<double> plan = controller(*env, rng);
      if (plan.empty() || plan.size() % static_cast<size_t>(dim) != 0)
        throw ContractViolation("run_rollouts: controller plan size not a multiple of action dim");
      const int avail = static_cast<int>(plan.size()) / dim;
      const int execute = std::min(act_horizon, avail);
      for (int jstep = 0; jstep < execute && !done; ++jstep) {
        std::vector<double> a(plan.begin() + static_cast<size_t>(jstep) * dim,
                              plan.begin() + static_cast<size_t>(jstep + 1) * dim);
        done = env->step(a).done;
      }
    }
    TrialLog log;
    log.seed = seed;
    log.success = env->success();
    log.steps = env->steps_taken();
    log.metric = env->metric();
    result.trials.push_back(log);
  }
  finalize(result);
  return result;
}

EvalResult run_rollouts(policy::TrainedPolicy& p, const sim::InstanceSpec& instance,
                        int n_trials, uint64_t seed_base, percept::Backend* backend) {
  if (n_trials <= 0) throw std::invalid_argument("run_rollouts: n_trials must be positive");
  const policy::PolicyConfig& cfg = p.config();
  const std::string prompt_text =
      p.prompt.empty() ? sim::default_prompt(instance.category) : p.prompt;
  const percept::PerceptionPrompt prompt = percept::PerceptionPrompt::parse(prompt_text);
  const bool needs_perception = cfg.variant != policy::Variant::kRgb;

  EvalResult result;
  result.task = sim::to_string(instance.category);
  result.instance = instance.render_style;
  result.variant = policy::to_string(cfg.variant);

  for (int i = 0; i < n_trials; ++i) {
    const uint64_t seed = seed_base + static_cast<uint64_t>(i);
    auto env = sim::make_env(instance.category);
    env->reset(instance, seed);
    percept::OracleBackend oracle(env.get());
    percept::Backend& be = backend != nullptr ? *backend : static_cast<percept::Backend&>(oracle);
    Rng rng(mix_seed(seed, kTrialSalt));
    const int dim = env->action_dim();

    std::deque<policy::ObsFrame> history;
    bool perception_failed = false;
    // Captures the current frame. Perception runs here, against the live env
    // state, because the oracle reads that state rather than the pixels.
    auto capture = [&]() {
      sim::EnvObs obs = env->observe();
      policy::ObsFrame frame;
      frame.proprio = obs.proprio;
      if (needs_perception) {
        try {
          percept::PerceptionResult res = be.perceive(obs.rgb, prompt);
          frame.mask = fusion::fuse_masks(res.masks).values;
          frame.depth = res.raw_depth;
        } catch (const TransportError&) {
          perception_failed = true;
          return;
        } catch (const ProtocolError&) {
          perception_failed = true;
          return;
        }
      } else {
        frame.rgb = std::move(obs.rgb);
      }
      history.push_back(std::move(frame));
      if (history.size() > static_cast<size_t>(cfg.n_obs)) history.pop_front();
    };

    capture();
    bool done = false;
    while (!done && !perception_failed) {
      policy::ObsWindow win;
      for (int jfr = 0; jfr < cfg.n_obs; ++jfr) {
        const int idx =
            std::max(0, static_cast<int>(history.size()) - cfg.n_obs + jfr);
        win.frames.push_back(history[static_cast<size_t>(idx)]);
      }
      const std::vector<double> plan = policy::predict_action(p, win, rng);
      for (int jstep = 0; jstep < cfg.act_horizon && !done; ++jstep) {
        std::vector<double> a(plan.begin() + static_cast<size_t>(jstep) * dim,
                              plan.begin() + static_cast<size_t>(jstep + 1) * dim);
        done = env->step(a).done;
        if (!done) {
          capture();
          if (perception_failed) break;
        }
      }
    }

    TrialLog log;
    log.seed = seed;
    log.success = env->success() && !perception_failed;
    log.steps = env->steps_taken();
    log.metric = env->metric();
    log.perception_failed = perception_failed;
    result.trials.push_back(log);
  }
  finalize(result);
  return result;
}

std::vector<EvalResult> ablation_run(const data::Dataset& ds,
                                     const std::vector<sim::InstanceSpec>& instances,
                                     const AblationOptions& opts) {
  if (instances.empty()) throw std::invalid_argument("ablation_run: no instances");
  if (opts.variants.empty()) throw std::invalid_argument("ablation_run: no variants");

  std::vector<policy::TrainedPolicy> trained;
  trained.reserve(opts.variants.size());
  for (policy::Variant v : opts.variants) {
    policy::PolicyConfig cfg = opts.base;
    cfg.variant = v;
    policy::FitOptions fit_opts;
    fit_opts.verbose = opts.verbose;
    if (!opts.log_dir.empty()) {
      std::filesystem::create_directories(opts.log_dir);
      fit_opts.log_path =
          (std::filesystem::path(opts.log_dir) / ("train_" + policy::to_string(v) + ".jsonl"))
              .string();
    }
    trained.push_back(policy::fit(ds, cfg, fit_opts));
  }

  std::vector<EvalResult> results;
  results.reserve(trained.size() * instances.size());
  for (auto& pol : trained) {
    for (const auto& inst : instances) {
      results.push_back(
          run_rollouts(pol, inst, opts.n_trials, opts.eval_seed_base, opts.backend));
    }
  }
  return results;
}

namespace {

std::string rate_cell(const EvalResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f [%.2f, %.2f]", r.success_rate, r.ci_low, r.ci_high);
  return buf;
}

void write_text_report(const std::vector<EvalResult>& results, const std::filesystem::path& path) {
  const std::vector<std::string> headers = {"task", "instance", "variant",
                                            "n",    "succ",     "rate [95% ci]"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : results) {
    rows.push_back({r.task, r.instance, r.variant, std::to_string(r.n_trials),
                    std::to_string(r.successes), rate_cell(r)});
  }
  std::vector<size_t> width(headers.size());
  for (size_t c = 0; c < headers.size(); ++c) width[c] = headers[c].size();
  for (const auto& row : rows)
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  std::ofstream out(path);
  if (!out) throw IoError("emit_report: cannot write " + path.string());
  auto emit_row = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < row.size(); ++c) {
      out << row[c];
      if (c + 1 < row.size()) out << std::string(width[c] - row[c].size() + 2, ' ');
    }
    out << "\n";
  };
  emit_row(headers);
  size_t total = 0;
  for (size_t c = 0; c < width.size(); ++c) total += width[c] + (c + 1 < width.size() ? 2 : 0);
  out << std::string(total, '-') << "\n";
  for (const auto& row : rows) emit_row(row);
}

void write_csv_report(const std::vector<EvalResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("emit_report: cannot write " + path.string());
  out << "task,instance,variant,n,successes,rate,ci_low,ci_high\n";
  for (const auto& r : results) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", r.success_rate, r.ci_low, r.ci_high);
    out << r.task << ',' << r.instance << ',' << r.variant << ',' << r.n_trials << ','
        << r.successes << ',' << buf << "\n";
  }
}

std::string upper(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

// Distinct fill per variant; unknown labels fall back to gray.
void variant_color(const std::string& v, uint8_t& r, uint8_t& g, uint8_t& b) {
  if (v == "s2") {
    r = 46, g = 125, b = 50;
  } else if (v == "rgb") {
    r = 198, g = 63, b = 52;
  } else if (v == "semantic-only") {
    r = 48, g = 99, b = 180;
  } else if (v == "spatial-only") {
    r = 226, g = 160, b = 44;
  } else {
    r = 120, g = 120, b = 120;
  }
}

void write_task_chart(const std::string& task, const std::vector<const EvalResult*>& cells,
                      const std::filesystem::path& path) {
  const int n = static_cast<int>(cells.size());
  const int margin_left = 46, margin_right = 16, margin_top = 30, margin_bottom = 58;
  const int bar_w = 34, gap = 18;
  const int plot_h = 220;
  const int w = std::max(320, margin_left + margin_right + n * (bar_w + gap) + gap);
  const int h = margin_top + plot_h + margin_bottom;

  ImageU8 img;
  img.h = h;
  img.w = w;
  img.c = 3;
  img.data.assign(static_cast<size_t>(h) * w * 3, 255);

  const int y0 = margin_top, y1 = margin_top + plot_h;
  auto rate_y = [&](double rate) {
    return y1 - static_cast<int>(std::lround(std::clamp(rate, 0.0, 1.0) * plot_h));
  };

  // Frame, gridlines and y ticks at 0, 0.25, ..., 1.
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    const int y = rate_y(v);
    fill_rect(img, y, margin_left, y + 1, w - margin_right, 225, 225, 225);
    char lab[8];
    std::snprintf(lab, sizeof(lab), "%.2f", v);
    draw_text(img, y - 3, 6, lab, 90, 90, 90);
  }
  fill_rect(img, y1, margin_left, y1 + 1, w - margin_right, 60, 60, 60);
  fill_rect(img, y0, margin_left, y1 + 1, margin_left + 1, 60, 60, 60);

  draw_text(img, 8, margin_left, upper("success rate: " + task), 30, 30, 30);

  int x = margin_left + gap;
  for (const EvalResult* cell : cells) {
    uint8_t r, g, b;
    variant_color(cell->variant, r, g, b);
    const int top = rate_y(cell->success_rate);
    if (top < y1) fill_rect(img, top, x, y1, x + bar_w, r, g, b);
    // CI whisker: vertical line with end caps.
    const int cy_lo = rate_y(cell->ci_low), cy_hi = rate_y(cell->ci_high);
    const int cx = x + bar_w / 2;
    fill_rect(img, cy_hi, cx, cy_lo + 1, cx + 1, 20, 20, 20);
    fill_rect(img, cy_hi, cx - 4, cy_hi + 1, cx + 5, 20, 20, 20);
    fill_rect(img, cy_lo, cx - 4, cy_lo + 1, cx + 5, 20, 20, 20);
    char lab[16];
    std::snprintf(lab, sizeof(lab), "%.2f", cell->success_rate);
    draw_text(img, std::max(y0 - 10, top - 10), x + 2, lab, 30, 30, 30);
    draw_text(img, y1 + 8, x - 6, upper(cell->variant).substr(0, 8), 30, 30, 30);
    draw_text(img, y1 + 20, x - 6, upper(cell->instance).substr(0, 8), 90, 90, 90);
    x += bar_w + gap;
  }

  const std::string png = png_encode_rgb8(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("emit_report: cannot write " + path.string());
  out.write(png.data(), static_cast<std::streamsize>(png.size()));
}

}  // namespace

void emit_report(const std::vector<EvalResult>& results, const std::string& out_dir) {
  if (results.empty()) throw std::invalid_argument("emit_report: empty result set");
  std::filesystem::path dir(out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("emit_report: cannot create " + out_dir);

  write_text_report(results, dir / "results.txt");
  write_csv_report(results, dir / "results.csv");

  // One chart per task, cells kept in result order.
  std::vector<std::string> task_order;
  std::map<std::string, std::vector<const EvalResult*>> by_task;
  for (const auto& r : results) {
    if (by_task.find(r.task) == by_task.end()) task_order.push_back(r.task);
    by_task[r.task].push_back(&r);
  }
  for (const auto& task : task_order)
    write_task_chart(task, by_task[task], dir / ("chart_" + task + ".png"));
}

}  // namespace s2diff::evalstats
