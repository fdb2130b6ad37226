// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "s2diff/data.hpp"
#include "s2diff/errors.hpp"
#include "s2diff/evalstats.hpp"
#include "s2diff/percept.hpp"
#include "s2diff/policy.hpp"
#include "s2diff/sim.hpp"

namespace s2diff::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    json j = json::parse(buf.str());
    if (!j.is_object()) throw std::invalid_argument("config file must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("bad config file " + path + ": " + e.what());
  }
}

// Flags beat the config file, which beats built-in defaults. A flag the user
// typed keeps its parsed value; otherwise the config file key, when present,
// replaces the default already stored in `value`.
template <typename T>
void merge_key(const CLI::App& app, const json& file_cfg, const std::string& flag,
               const std::string& key, T& value) {
  if (app.count(flag) > 0) return;
  if (file_cfg.contains(key)) value = file_cfg.at(key).get<T>();
}

void write_run_config(const fs::path& out_dir, const json& resolved) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "run_config.json");
  if (!out) throw IoError("cannot write " + (out_dir / "run_config.json").string());
  out << resolved.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : text) {
    if (ch == ',') {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

// Null when S2_PERCEPTION_URL is unset (the oracle backend is used instead).
std::unique_ptr<percept::RemoteBackend> backend_from_env() {
  const char* url = std::getenv("S2_PERCEPTION_URL");
  if (url == nullptr || *url == '\0') return nullptr;
  percept::RemoteConfig cfg;
  cfg.base_url = url;
  return std::make_unique<percept::RemoteBackend>(cfg);
}

std::string checkpoint_path(const std::string& policy_arg) {
  if (fs::is_directory(policy_arg)) return (fs::path(policy_arg) / "policy.ckpt").string();
  return policy_arg;
}

// Shared --config handling plus per-field overrides for `train` and `ablate`.
struct PolicyConfigFlags {
  std::string config_file;
  std::string variant, head, augment;
  int n_obs = 0, pred_horizon = 0, act_horizon = 0, diffusion_steps = 0, n_infer_steps = 0;
  int epochs = 0, warmup = 0, batch = 0, feature_dim = 0, image_size = 0, base_width = 0;
  int width1 = 0, width2 = 0;
  double eta = 0.0, lr = 0.0, ema = 0.0, wd = 0.0;
  uint64_t seed = 0;

  void attach(CLI::App& cmd, bool with_variant) {
    cmd.add_option("--config", config_file, "JSON config file (policy settings)");
    if (with_variant)
      cmd.add_option("--variant", variant, "observation variant: s2|rgb|semantic-only|spatial-only");
    cmd.add_option("--head", head, "encoder head: gap|spatial-softmax");
    cmd.add_option("--augment", augment, "training augmentation: none|hflip|dihedral");
    cmd.add_option("--n-obs", n_obs, "observation frames per window");
    cmd.add_option("--pred-horizon", pred_horizon, "predicted action steps");
    cmd.add_option("--act-horizon", act_horizon, "executed action steps per plan");
    cmd.add_option("--diffusion-steps", diffusion_steps, "training noise levels K");
    cmd.add_option("--infer-steps", n_infer_steps, "sampling steps at inference");
    cmd.add_option("--eta", eta, "sampler stochasticity in [0, 1]");
    cmd.add_option("--epochs", epochs, "training epochs");
    cmd.add_option("--lr", lr, "peak learning rate");
    cmd.add_option("--warmup", warmup, "linear warm-up steps");
    cmd.add_option("--batch", batch, "batch size");
    cmd.add_option("--ema", ema, "EMA decay for inference weights");
    cmd.add_option("--wd", wd, "weight decay");
    cmd.add_option("--seed", seed, "training seed");
    cmd.add_option("--feature-dim", feature_dim, "encoder feature dimension");
    cmd.add_option("--image-size", image_size, "encoder input resolution");
    cmd.add_option("--base-width", base_width, "encoder stem width");
    cmd.add_option("--width1", width1, "denoiser first-level width");
    cmd.add_option("--width2", width2, "denoiser bottleneck width");
  }

  policy::PolicyConfig resolve(const CLI::App& cmd) const {
    policy::PolicyConfig cfg;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw IoError("cannot open config file " + config_file);
      std::stringstream buf;
      buf << in.rdbuf();
      cfg = policy::config_from_json(buf.str());
    }
    auto given = [&cmd](const std::string& flag) {
      const CLI::Option* opt = cmd.get_option_no_throw(flag);
      return opt != nullptr && opt->count() > 0;
    };
    if (given("--variant")) cfg.variant = policy::variant_from_string(variant);
    if (given("--head")) cfg.head = nets::head_kind_from_string(head);
    if (given("--augment")) cfg.augment = policy::augment_from_string(augment);
    if (given("--n-obs")) cfg.n_obs = n_obs;
    if (given("--pred-horizon")) cfg.pred_horizon = pred_horizon;
    if (given("--act-horizon")) cfg.act_horizon = act_horizon;
    if (given("--diffusion-steps")) cfg.diffusion_steps = diffusion_steps;
    if (given("--infer-steps")) cfg.n_infer_steps = n_infer_steps;
    if (given("--eta")) cfg.eta = eta;
    if (given("--epochs")) cfg.epochs = epochs;
    if (given("--lr")) cfg.lr = lr;
    if (given("--warmup")) cfg.warmup_steps = warmup;
    if (given("--batch")) cfg.batch_size = batch;
    if (given("--ema")) cfg.ema_decay = ema;
    if (given("--wd")) cfg.weight_decay = wd;
    if (given("--seed")) cfg.seed = seed;
    if (given("--feature-dim")) cfg.feature_dim = feature_dim;
    if (given("--image-size")) cfg.image_size = image_size;
    if (given("--base-width")) cfg.base_width = base_width;
    if (given("--width1")) cfg.denoiser_width1 = width1;
    if (given("--width2")) cfg.denoiser_width2 = width2;
    cfg.validate();
    return cfg;
  }
};

int cmd_demos(const CLI::App& cmd, const std::string& config_file, std::string task,
              std::string instance, uint64_t bg_seed, int episodes, uint64_t seed,
              std::string prompt, const std::string& out_dir) {
  json file_cfg = config_file.empty() ? json::object() : load_config_file(config_file);
  merge_key(cmd, file_cfg, "--task", "task", task);
  merge_key(cmd, file_cfg, "--instance", "instance", instance);
  merge_key(cmd, file_cfg, "--bg-seed", "background_seed", bg_seed);
  merge_key(cmd, file_cfg, "--n", "episodes", episodes);
  merge_key(cmd, file_cfg, "--seed", "seed", seed);
  merge_key(cmd, file_cfg, "--prompt", "prompt", prompt);

  data::RecordOptions ro;
  ro.instance.category = sim::task_from_string(task);
  ro.instance.render_style = instance;
  ro.instance.background_seed = bg_seed;
  ro.episodes = episodes;
  ro.seed = seed;
  ro.prompt = prompt;
  ro.out_dir = out_dir;
  const data::Manifest manifest = data::record_demos(ro);

  write_run_config(out_dir, {{"command", "demos"},
                             {"task", task},
                             {"instance", instance},
                             {"background_seed", bg_seed},
                             {"episodes", episodes},
                             {"seed", seed},
                             {"prompt", manifest.prompt},
                             {"out", out_dir}});
  std::cout << "recorded " << manifest.episodes.size() << " episodes (" << task << ", "
            << instance << ") -> " << out_dir << "\n";
  return 0;
}

int cmd_train(const CLI::App& cmd, const PolicyConfigFlags& flags, const std::string& data_dir,
              const std::string& out_dir, bool verbose) {
  const policy::PolicyConfig cfg = flags.resolve(cmd);
  const data::Dataset ds = data::load_dataset(data_dir);

  fs::create_directories(out_dir);
  policy::FitOptions opts;
  opts.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
  opts.verbose = verbose;
  const policy::TrainedPolicy p = policy::fit(ds, cfg, opts);

  const std::string ckpt = (fs::path(out_dir) / "policy.ckpt").string();
  policy::save_checkpoint(ckpt, p);
  write_run_config(out_dir, {{"command", "train"},
                             {"data", data_dir},
                             {"out", out_dir},
                             {"config", json::parse(policy::config_to_json(cfg))}});
  std::cout << "trained " << policy::to_string(cfg.variant) << " policy on "
            << ds.episodes.size() << " episodes -> " << ckpt << "\n";
  return 0;
}

int cmd_eval(const CLI::App& cmd, const std::string& policy_arg, std::string task,
             const std::string& instance, uint64_t bg_seed, int trials, uint64_t seed_base,
             std::string out_dir) {
  policy::TrainedPolicy p = policy::load_checkpoint(checkpoint_path(policy_arg));
  if (task.empty()) task = p.task;
  if (task.empty()) throw std::invalid_argument("checkpoint carries no task; pass --task");

  sim::InstanceSpec inst;
  inst.category = sim::task_from_string(task);
  inst.render_style = instance;
  inst.background_seed = bg_seed;

  auto remote = backend_from_env();
  const evalstats::EvalResult r =
      evalstats::run_rollouts(p, inst, trials, seed_base, remote.get());
  const std::string payload = evalstats::to_json(r);
  std::cout << payload << "\n";

  if (out_dir.empty()) {
    const fs::path base = fs::is_directory(policy_arg) ? fs::path(policy_arg)
                                                       : fs::path(policy_arg).parent_path();
    out_dir = (base / "eval").string();
  }
  fs::create_directories(out_dir);
  const std::string name = "eval_" + task + "_" + instance + ".json";
  std::ofstream out(fs::path(out_dir) / name);
  if (!out) throw IoError("cannot write eval result to " + out_dir);
  out << payload << "\n";
  write_run_config(out_dir, {{"command", "eval"},
                             {"policy", policy_arg},
                             {"task", task},
                             {"instance", instance},
                             {"background_seed", bg_seed},
                             {"trials", trials},
                             {"seed_base", seed_base},
                             {"remote_backend", remote != nullptr},
                             {"out", out_dir}});
  return 0;
}

int cmd_ablate(const CLI::App& cmd, const PolicyConfigFlags& flags, const std::string& data_dir,
               const std::string& out_dir, const std::string& variants_csv,
               const std::string& instances_csv, uint64_t bg_seed, int trials,
               uint64_t seed_base, bool verbose) {
  const policy::PolicyConfig base = flags.resolve(cmd);
  const data::Dataset ds = data::load_dataset(data_dir);
  const sim::Task task = sim::task_from_string(ds.manifest.task);

  evalstats::AblationOptions opts;
  opts.base = base;
  opts.variants.clear();
  for (const auto& name : split_list(variants_csv))
    opts.variants.push_back(policy::variant_from_string(name));
  opts.n_trials = trials;
  opts.eval_seed_base = seed_base;
  opts.log_dir = out_dir;
  opts.verbose = verbose;
  auto remote = backend_from_env();
  opts.backend = remote.get();

  std::vector<sim::InstanceSpec> instances;
  for (const auto& style : split_list(instances_csv)) {
    sim::InstanceSpec inst;
    inst.category = task;
    inst.render_style = style;
    inst.background_seed = bg_seed;
    instances.push_back(inst);
  }

  const std::vector<evalstats::EvalResult> results = evalstats::ablation_run(ds, instances, opts);

  fs::create_directories(out_dir);
  json arr = json::array();
  for (const auto& r : results) arr.push_back(json::parse(evalstats::to_json(r)));
  std::ofstream res_out(fs::path(out_dir) / "results.json");
  if (!res_out) throw IoError("cannot write results to " + out_dir);
  res_out << arr.dump(2) << "\n";

  evalstats::emit_report(results, out_dir);
  write_run_config(out_dir, {{"command", "ablate"},
                             {"data", data_dir},
                             {"out", out_dir},
                             {"variants", variants_csv},
                             {"instances", instances_csv},
                             {"background_seed", bg_seed},
                             {"trials", trials},
                             {"seed_base", seed_base},
                             {"remote_backend", remote != nullptr},
                             {"config", json::parse(policy::config_to_json(base))}});
  std::cout << "ablation matrix (" << opts.variants.size() << " variants x " << instances.size()
            << " instances) -> " << (fs::path(out_dir) / "results.txt").string() << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_dir) {
  std::vector<evalstats::EvalResult> results;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open results file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    json j;
    try {
      j = json::parse(buf.str());
    } catch (const json::exception& e) {
      throw CorruptionError("bad results file " + path + ": " + e.what());
    }
    if (j.is_array()) {
      for (const auto& item : j) results.push_back(evalstats::eval_result_from_json(item.dump()));
    } else {
      results.push_back(evalstats::eval_result_from_json(j.dump()));
    }
  }
  evalstats::emit_report(results, out_dir);
  write_run_config(out_dir, {{"command", "report"}, {"inputs", inputs}, {"out", out_dir}});
  std::cout << "report -> " << (fs::path(out_dir) / "results.txt").string() << "\n";
  return 0;
}

int cmd_mock_perception(const std::string& task, const std::string& instance, uint64_t bg_seed,
                        uint64_t seed, int port) {
  auto env = sim::make_env(sim::task_from_string(task));
  sim::InstanceSpec inst;
  inst.category = env->task();
  inst.render_style = instance;
  inst.background_seed = bg_seed;
  env->reset(inst, seed);

  const percept::PerceptionPrompt prompt =
      percept::PerceptionPrompt::parse(sim::default_prompt(env->task()));
  const percept::PerceptionResult truth = env->ground_truth_perception(prompt);

  percept::MockPerceptionServer server;
  server.set_fixture({truth.masks, truth.raw_depth});
  server.start(port);
  std::cout << "mock perception server on " << server.url() << " (fixture: " << task << ", "
            << instance << ", seed " << seed << ")\n"
            << "press ctrl-c to stop\n";
  for (;;) std::this_thread::sleep_for(std::chrono::seconds(3600));
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"spatial-semantic diffusion policy toolkit"};
  app.require_subcommand(1);

  // demos
  auto* demos = app.add_subcommand("demos", "record expert demonstration datasets");
  std::string d_task = "wiping", d_instance = "red", d_prompt, d_out, d_config;
  uint64_t d_bg = 0, d_seed = 0;
  int d_n = 40;
  demos->add_option("--task", d_task, "wiping|scooping");
  demos->add_option("--instance", d_instance, "render style, e.g. red or rice");
  demos->add_option("--bg-seed", d_bg, "background texture seed");
  demos->add_option("--n", d_n, "episodes to record");
  demos->add_option("--seed", d_seed, "base episode seed");
  demos->add_option("--prompt", d_prompt, "perception prompt (default: task prompt)");
  demos->add_option("--out", d_out, "output dataset directory")->required();
  demos->add_option("--config", d_config, "JSON config file");

  // train
  auto* train = app.add_subcommand("train", "fit a policy variant on a dataset");
  PolicyConfigFlags t_flags;
  std::string t_data, t_out;
  bool t_verbose = false;
  train->add_option("--data", t_data, "dataset directory")->required();
  train->add_option("--out", t_out, "run directory for checkpoint and log")->required();
  t_flags.attach(*train, true);
  train->add_flag("--verbose", t_verbose, "mirror training log to stderr");

  // eval
  auto* eval = app.add_subcommand("eval", "roll out a trained policy");
  std::string e_policy, e_task, e_instance = "red", e_out;
  uint64_t e_bg = 0, e_seed_base = 1000;
  int e_trials = 20;
  eval->add_option("--policy", e_policy, "run directory or checkpoint file")->required();
  eval->add_option("--task", e_task, "wiping|scooping (default: from checkpoint)");
  eval->add_option("--instance", e_instance, "render style to evaluate on");
  eval->add_option("--bg-seed", e_bg, "background texture seed");
  eval->add_option("--trials", e_trials, "number of rollouts");
  eval->add_option("--seed-base", e_seed_base, "seed for trial 0; trial i adds i");
  eval->add_option("--out", e_out, "output directory (default: <policy>/eval)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train all variants and evaluate the matrix");
  PolicyConfigFlags a_flags;
  std::string a_data, a_out, a_variants = "s2,rgb,semantic-only,spatial-only", a_instances;
  uint64_t a_bg = 0, a_seed_base = 1000;
  int a_trials = 20;
  bool a_verbose = false;
  ablate->add_option("--data", a_data, "dataset directory")->required();
  ablate->add_option("--out", a_out, "output directory")->required();
  ablate->add_option("--variants", a_variants, "comma list of variants");
  ablate->add_option("--instances", a_instances, "comma list of render styles")->required();
  ablate->add_option("--bg-seed", a_bg, "background texture seed");
  ablate->add_option("--trials", a_trials, "rollouts per cell");
  ablate->add_option("--seed-base", a_seed_base, "seed for trial 0 of every cell");
  a_flags.attach(*ablate, false);
  ablate->add_flag("--verbose", a_verbose, "mirror training logs to stderr");

  // report
  auto* report = app.add_subcommand("report", "render tables and charts from saved results");
  std::vector<std::string> r_inputs;
  std::string r_out;
  report->add_option("--results", r_inputs, "results.json files (repeatable)")->required();
  report->add_option("--out", r_out, "output directory")->required();

  // mock-perception
  auto* mock = app.add_subcommand("mock-perception", "serve fixture perception responses");
  std::string m_task = "wiping", m_instance = "red";
  uint64_t m_bg = 0, m_seed = 0;
  int m_port = 8731;
  mock->add_option("--task", m_task, "wiping|scooping");
  mock->add_option("--instance", m_instance, "render style for the fixture frame");
  mock->add_option("--bg-seed", m_bg, "background texture seed");
  mock->add_option("--seed", m_seed, "env seed for the fixture frame");
  mock->add_option("--port", m_port, "port (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (demos->parsed())
      return cmd_demos(*demos, d_config, d_task, d_instance, d_bg, d_n, d_seed, d_prompt, d_out);
    if (train->parsed()) return cmd_train(*train, t_flags, t_data, t_out, t_verbose);
    if (eval->parsed())
      return cmd_eval(*eval, e_policy, e_task, e_instance, e_bg, e_trials, e_seed_base, e_out);
    if (ablate->parsed())
      return cmd_ablate(*ablate, a_flags, a_data, a_out, a_variants, a_instances, a_bg, a_trials,
                        a_seed_base, a_verbose);
    if (report->parsed()) return cmd_report(r_inputs, r_out);
    if (mock->parsed()) return cmd_mock_perception(m_task, m_instance, m_bg, m_seed, m_port);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("s2diff");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const auto& s : full) argv.push_back(s.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace s2diff::cli
