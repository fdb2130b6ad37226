// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/policy.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "json.hpp"

#include "s2diff/errors.hpp"
#include "s2diff/fusion.hpp"
#include "s2diff/sim.hpp"

namespace s2diff::policy {

namespace {

using nlohmann::json;

constexpr uint64_t kInitSalt = 0x1d17a5eeULL;
constexpr uint64_t kBatchSalt = 0xba7c45a1ULL;
constexpr uint64_t kNoiseSalt = 0x4e015e77ULL;
constexpr uint64_t kAugSalt = 0x9c64fb23ULL;
constexpr char kCkptMagic[8] = {'S', '2', 'C', 'K', 'P', 'T', '1', '\0'};

uint64_t sample_key(int episode, int t) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(episode)) << 32) |
         static_cast<uint32_t>(t);
}

// Board symmetry applied to one training sample. Bit 0 mirrors x, bit 1
// mirrors y, bit 2 transposes; the point map is transpose first, then the
// mirrors, and images use the inverse map so planes stay aligned with the
// transformed positions.
struct SampleTransform {
  bool fx = false, fy = false, tr = false;

  void point(double& x, double& y) const {
    if (tr) std::swap(x, y);
    if (fy) y = 1.0 - y;
    if (fx) x = 1.0 - x;
  }
  void vec(double& vx, double& vy) const {
    if (tr) std::swap(vx, vy);
    if (fy) vy = -vy;
    if (fx) vx = -vx;
  }
  void plane(double* p, int s, std::vector<double>& scratch) const {
    if (!fx && !fy && !tr) return;
    scratch.assign(p, p + static_cast<size_t>(s) * s);
    for (int yn = 0; yn < s; ++yn) {
      for (int xn = 0; xn < s; ++xn) {
        int x = fx ? s - 1 - xn : xn;
        int y = fy ? s - 1 - yn : yn;
        if (tr) std::swap(x, y);
        p[static_cast<size_t>(yn) * s + xn] = scratch[static_cast<size_t>(y) * s + x];
      }
    }
  }
};

SampleTransform draw_transform(Augment mode, uint64_t draw_key, uint64_t key) {
  SampleTransform t;
  if (mode == Augment::kNone) return t;
  Rng ar(mix_seed(draw_key, kAugSalt, key));
  if (mode == Augment::kHFlip) {
    t.fx = ar.uniform_int(0, 1) != 0;
  } else {
    const int id = ar.uniform_int(0, 7);
    t.fx = (id & 1) != 0;
    t.fy = (id & 2) != 0;
    t.tr = (id & 4) != 0;
  }
  return t;
}

// Average-pools one [src, src] plane into dst at [size, size]; getter maps
// (y, x) to the source value.
template <typename Getter>
void pool_plane(double* dst, int src, int size, Getter&& get) {
  const int f = src / size;
  const double inv = 1.0 / (f * f);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int dy = 0; dy < f; ++dy) {
        for (int dx = 0; dx < f; ++dx) acc += get(y * f + dy, x * f + dx);
      }
      dst[static_cast<size_t>(y) * size + x] = acc * inv;
    }
  }
}

void check_pool(int src, int size) {
  if (size < 1 || src % size != 0) {
    throw std::invalid_argument("observation size must divide the frame size");
  }
}

}  // namespace

Variant variant_from_string(const std::string& name) {
  if (name == "s2") return Variant::kS2;
  if (name == "rgb") return Variant::kRgb;
  if (name == "semantic-only") return Variant::kSemanticOnly;
  if (name == "spatial-only") return Variant::kSpatialOnly;
  throw std::invalid_argument("unknown policy variant: " + name);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kS2: return "s2";
    case Variant::kRgb: return "rgb";
    case Variant::kSemanticOnly: return "semantic-only";
    case Variant::kSpatialOnly: return "spatial-only";
  }
  throw std::invalid_argument("bad variant enum");
}

int variant_channels(Variant v) {
  switch (v) {
    case Variant::kS2: return 2;
    case Variant::kRgb: return 3;
    default: return 1;
  }
}

Augment augment_from_string(const std::string& name) {
  if (name == "none") return Augment::kNone;
  if (name == "hflip") return Augment::kHFlip;
  if (name == "dihedral") return Augment::kDihedral;
  throw std::invalid_argument("unknown augment mode: " + name);
}

std::string to_string(Augment a) {
  switch (a) {
    case Augment::kNone: return "none";
    case Augment::kHFlip: return "hflip";
    case Augment::kDihedral: return "dihedral";
  }
  throw std::invalid_argument("bad augment enum");
}

void PolicyConfig::validate() const {
  if (n_obs < 1) throw std::invalid_argument("n_obs must be positive");
  if (pred_horizon < 2 || pred_horizon % 2 != 0) {
    throw std::invalid_argument("pred_horizon must be even and at least 2");
  }
  if (act_horizon < 1 || act_horizon > pred_horizon) {
    throw std::invalid_argument("act_horizon must be in [1, pred_horizon]");
  }
  if (diffusion_steps < 1) throw std::invalid_argument("diffusion_steps must be positive");
  if (n_infer_steps < 1 || n_infer_steps > diffusion_steps) {
    throw std::invalid_argument("n_infer_steps must be in [1, diffusion_steps]");
  }
  if (epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  if (lr <= 0.0) throw std::invalid_argument("lr must be positive");
  if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be nonnegative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (ema_decay < 0.0 || ema_decay >= 1.0) {
    throw std::invalid_argument("ema_decay must be in [0, 1)");
  }
  if (image_size < 16 || image_size % 16 != 0 || sim::kFrame % image_size != 0) {
    throw std::invalid_argument(
        "image_size must be a multiple of 16 dividing the rendered frame size");
  }
  if (feature_dim < 8) throw std::invalid_argument("feature_dim must be at least 8");
  if (base_width < 1 || denoiser_width1 < 1 || denoiser_width2 < 1) {
    throw std::invalid_argument("network widths must be positive");
  }
}

std::string config_to_json(const PolicyConfig& cfg) {
  json j;
  j["variant"] = to_string(cfg.variant);
  j["n_obs"] = cfg.n_obs;
  j["pred_horizon"] = cfg.pred_horizon;
  j["act_horizon"] = cfg.act_horizon;
  j["diffusion_steps"] = cfg.diffusion_steps;
  j["n_infer_steps"] = cfg.n_infer_steps;
  j["eta"] = cfg.eta;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr;
  j["warmup_steps"] = cfg.warmup_steps;
  j["batch_size"] = cfg.batch_size;
  j["ema_decay"] = cfg.ema_decay;
  j["weight_decay"] = cfg.weight_decay;
  j["augment"] = to_string(cfg.augment);
  j["seed"] = cfg.seed;
  j["feature_dim"] = cfg.feature_dim;
  j["image_size"] = cfg.image_size;
  j["base_width"] = cfg.base_width;
  j["head"] = nets::to_string(cfg.head);
  j["denoiser_width1"] = cfg.denoiser_width1;
  j["denoiser_width2"] = cfg.denoiser_width2;
  return j.dump(2);
}

PolicyConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad policy config JSON: ") + e.what());
  }
  PolicyConfig cfg;
  try {
    if (j.contains("variant")) cfg.variant = variant_from_string(j.at("variant"));
    if (j.contains("n_obs")) cfg.n_obs = j.at("n_obs");
    if (j.contains("pred_horizon")) cfg.pred_horizon = j.at("pred_horizon");
    if (j.contains("act_horizon")) cfg.act_horizon = j.at("act_horizon");
    if (j.contains("diffusion_steps")) cfg.diffusion_steps = j.at("diffusion_steps");
    if (j.contains("n_infer_steps")) cfg.n_infer_steps = j.at("n_infer_steps");
    if (j.contains("eta")) cfg.eta = j.at("eta");
    if (j.contains("epochs")) cfg.epochs = j.at("epochs");
    if (j.contains("lr")) cfg.lr = j.at("lr");
    if (j.contains("warmup_steps")) cfg.warmup_steps = j.at("warmup_steps");
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size");
    if (j.contains("ema_decay")) cfg.ema_decay = j.at("ema_decay");
    if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay");
    if (j.contains("augment")) cfg.augment = augment_from_string(j.at("augment"));
    if (j.contains("seed")) cfg.seed = j.at("seed");
    if (j.contains("feature_dim")) cfg.feature_dim = j.at("feature_dim");
    if (j.contains("image_size")) cfg.image_size = j.at("image_size");
    if (j.contains("base_width")) cfg.base_width = j.at("base_width");
    if (j.contains("head")) cfg.head = nets::head_kind_from_string(j.at("head"));
    if (j.contains("denoiser_width1")) cfg.denoiser_width1 = j.at("denoiser_width1");
    if (j.contains("denoiser_width2")) cfg.denoiser_width2 = j.at("denoiser_width2");
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad policy config JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double lr_at_step(const PolicyConfig& cfg, int step, int total_steps) {
  if (step < 1) throw std::invalid_argument("lr step is 1-based");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step) / cfg.warmup_steps;
  }
  const int span = std::max(1, total_steps - cfg.warmup_steps);
  const double progress =
      std::clamp(static_cast<double>(step - cfg.warmup_steps) / span, 0.0, 1.0);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// TrainedPolicy

TrainedPolicy::TrainedPolicy(const PolicyConfig& cfg, int action_dim, int proprio_dim,
                             const data::DatasetStats& stats)
    : cfg_(cfg), action_dim_(action_dim), proprio_dim_(proprio_dim), stats_(stats) {
  cfg_.validate();
  if (action_dim < 1 || proprio_dim < 1) {
    throw std::invalid_argument("action and proprio dims must be positive");
  }
  if (static_cast<int>(stats.action_min.size()) != action_dim ||
      static_cast<int>(stats.action_max.size()) != action_dim ||
      static_cast<int>(stats.proprio_min.size()) != proprio_dim ||
      static_cast<int>(stats.proprio_max.size()) != proprio_dim) {
    throw std::invalid_argument("normalizer statistics do not match the dims");
  }
  sched_ = sched::make_schedule(cfg.diffusion_steps, sched::ScheduleKind::kSquaredCosine);

  nets::EncoderConfig ec;
  ec.in_channels = variant_channels(cfg.variant);
  ec.feature_dim = cfg.feature_dim;
  ec.image_size = cfg.image_size;
  ec.base_width = cfg.base_width;
  ec.head = cfg.head;
  nets::DenoiserConfig dc;
  dc.action_dim = action_dim;
  dc.horizon = cfg.pred_horizon;
  dc.width1 = cfg.denoiser_width1;
  dc.width2 = cfg.denoiser_width2;

  const uint64_t init = mix_seed(cfg.seed, kInitSalt);
  net_ = std::make_unique<nets::PolicyNet>(params_, ec, dc, cfg.n_obs, proprio_dim, init);
  infer_net_ =
      std::make_unique<nets::PolicyNet>(infer_params_, ec, dc, cfg.n_obs, proprio_dim, init);
  ema_ = nets::Ema(params_);
}

void TrainedPolicy::sync_inference_weights() { ema_.copy_into(infer_params_); }

// ---------------------------------------------------------------------------
// Observation assembly

std::vector<double> build_observation(const data::Episode& ep, const std::vector<int>& obs_t,
                                      Variant variant, int image_size) {
  const int src = sim::kFrame;
  check_pool(src, image_size);
  const int C = variant_channels(variant);
  const int S = image_size;
  const size_t plane = static_cast<size_t>(S) * S;
  const size_t frame = static_cast<size_t>(src) * src;
  std::vector<double> out(obs_t.size() * C * plane);

  for (size_t j = 0; j < obs_t.size(); ++j) {
    const int t = obs_t[j];
    if (t < 0 || t >= ep.steps) throw ContractViolation("observation index out of range");
    double* dst = out.data() + j * C * plane;
    switch (variant) {
      case Variant::kRgb: {
        const uint8_t* px = ep.rgb.data() + static_cast<size_t>(t) * frame * 3;
        for (int c = 0; c < 3; ++c) {
          pool_plane(dst + static_cast<size_t>(c) * plane, src, S, [&](int y, int x) {
            return px[(static_cast<size_t>(y) * src + x) * 3 + c] / 255.0;
          });
        }
        break;
      }
      case Variant::kS2:
      case Variant::kSemanticOnly:
      case Variant::kSpatialOnly: {
        int c = 0;
        if (variant != Variant::kSpatialOnly) {
          const float* m = ep.gt_mask.data() + static_cast<size_t>(t) * frame;
          pool_plane(dst + static_cast<size_t>(c++) * plane, src, S, [&](int y, int x) {
            return static_cast<double>(m[static_cast<size_t>(y) * src + x]);
          });
        }
        if (variant != Variant::kSemanticOnly) {
          GridF raw(src, src, std::vector<float>(
                                  ep.gt_depth.begin() + static_cast<size_t>(t) * frame,
                                  ep.gt_depth.begin() + static_cast<size_t>(t + 1) * frame));
          const auto depth = fusion::normalize_depth(raw);
          pool_plane(dst + static_cast<size_t>(c) * plane, src, S, [&](int y, int x) {
            return static_cast<double>(depth.values.v[static_cast<size_t>(y) * src + x]);
          });
        }
        break;
      }
    }
  }
  return out;
}

std::vector<double> build_observation(const ObsWindow& win, Variant variant, int image_size) {
  const int C = variant_channels(variant);
  const int S = image_size;
  const size_t plane = static_cast<size_t>(S) * S;
  std::vector<double> out(win.frames.size() * C * plane);

  for (size_t j = 0; j < win.frames.size(); ++j) {
    const ObsFrame& f = win.frames[j];
    double* dst = out.data() + j * C * plane;
    switch (variant) {
      case Variant::kRgb: {
        if (f.rgb.h < 1 || f.rgb.w != f.rgb.h || f.rgb.c != 3) {
          throw std::invalid_argument("observation frame missing rgb");
        }
        const int src = f.rgb.h;
        check_pool(src, S);
        for (int c = 0; c < 3; ++c) {
          pool_plane(dst + static_cast<size_t>(c) * plane, src, S,
                     [&](int y, int x) { return f.rgb.at(y, x, c) / 255.0; });
        }
        break;
      }
      case Variant::kS2:
      case Variant::kSemanticOnly:
      case Variant::kSpatialOnly: {
        int c = 0;
        if (variant != Variant::kSpatialOnly) {
          if (f.mask.h < 1 || f.mask.w != f.mask.h) {
            throw std::invalid_argument("observation frame missing mask");
          }
          check_pool(f.mask.h, S);
          const int src = f.mask.h;
          pool_plane(dst + static_cast<size_t>(c++) * plane, src, S, [&](int y, int x) {
            return static_cast<double>(f.mask.v[static_cast<size_t>(y) * src + x]);
          });
        }
        if (variant != Variant::kSemanticOnly) {
          if (f.depth.h < 1 || f.depth.w != f.depth.h) {
            throw std::invalid_argument("observation frame missing depth");
          }
          check_pool(f.depth.h, S);
          const int src = f.depth.h;
          const auto depth = fusion::normalize_depth(f.depth);
          pool_plane(dst + static_cast<size_t>(c) * plane, src, S, [&](int y, int x) {
            return static_cast<double>(depth.values.v[static_cast<size_t>(y) * src + x]);
          });
        }
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainedPolicy& policy)
    : p_(policy), opt_(policy.config().lr, policy.config().weight_decay) {}

double Trainer::train_step(const data::Dataset& ds, const std::vector<data::Sample>& batch,
                           uint64_t draw_key, double lr) {
  return run(ds, batch, draw_key, lr, true);
}

double Trainer::eval_loss(const data::Dataset& ds, const std::vector<data::Sample>& batch,
                          uint64_t draw_key) {
  return run(ds, batch, draw_key, 0.0, false);
}

double Trainer::run(const data::Dataset& ds, const std::vector<data::Sample>& batch,
                    uint64_t draw_key, double lr, bool update) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const PolicyConfig& cfg = p_.config();
  const int n = static_cast<int>(batch.size());
  const int A = p_.action_dim();
  const int P = p_.proprio_dim();
  const int H = cfg.pred_horizon;
  const int C = variant_channels(cfg.variant);
  const int S = cfg.image_size;
  const size_t obs_frame = static_cast<size_t>(C) * S * S;
  const data::DatasetStats& st = p_.stats();

  std::vector<double> images(static_cast<size_t>(n) * cfg.n_obs * obs_frame);
  std::vector<double> proprio(static_cast<size_t>(n) * cfg.n_obs * P);
  std::vector<double> a0(static_cast<size_t>(n) * A * H);
  std::vector<double> a_noisy(a0.size());
  std::vector<int> ks(n);

  std::vector<double> scratch;
  for (int i = 0; i < n; ++i) {
    const data::Sample& smp = batch[i];
    if (smp.episode < 0 || smp.episode >= static_cast<int>(ds.episodes.size())) {
      throw ContractViolation("sample episode out of range");
    }
    const data::Episode& ep = ds.episodes[smp.episode];
    const auto obs = build_observation(ep, smp.obs_t, cfg.variant, S);
    std::copy(obs.begin(), obs.end(),
              images.begin() + static_cast<size_t>(i) * cfg.n_obs * obs_frame);

    const SampleTransform tf =
        draw_transform(cfg.augment, draw_key, sample_key(smp.episode, smp.t));
    const bool moved = tf.fx || tf.fy || tf.tr;
    if (moved) {
      double* base = images.data() + static_cast<size_t>(i) * cfg.n_obs * obs_frame;
      for (int pl = 0; pl < cfg.n_obs * C; ++pl) {
        tf.plane(base + static_cast<size_t>(pl) * S * S, S, scratch);
      }
    }

    for (int j = 0; j < cfg.n_obs; ++j) {
      const int t = smp.obs_t[j];
      double p0 = ep.proprio[static_cast<size_t>(t) * P];
      double p1 = P > 1 ? ep.proprio[static_cast<size_t>(t) * P + 1] : 0.0;
      if (moved) tf.point(p0, p1);
      for (int d = 0; d < P; ++d) {
        double raw = ep.proprio[static_cast<size_t>(t) * P + d];
        if (moved && d == 0) raw = p0;
        if (moved && d == 1) raw = p1;
        proprio[(static_cast<size_t>(i) * cfg.n_obs + j) * P + d] =
            data::normalize_value(raw, st.proprio_min[d], st.proprio_max[d]);
      }
    }
    // Time-major chunk -> channel-major [A, H].
    for (int t = 0; t < H; ++t) {
      double v0 = 0.0, v1 = 0.0;
      if (moved) {
        v0 = data::denormalize_value(smp.action_chunk[static_cast<size_t>(t) * A],
                                     st.action_min[0], st.action_max[0]);
        v1 = A > 1 ? data::denormalize_value(smp.action_chunk[static_cast<size_t>(t) * A + 1],
                                             st.action_min[1], st.action_max[1])
                   : 0.0;
        tf.vec(v0, v1);
      }
      for (int d = 0; d < A; ++d) {
        double v = smp.action_chunk[static_cast<size_t>(t) * A + d];
        if (moved && d == 0) v = data::normalize_value(v0, st.action_min[0], st.action_max[0]);
        if (moved && d == 1) v = data::normalize_value(v1, st.action_min[1], st.action_max[1]);
        a0[(static_cast<size_t>(i) * A + d) * H + t] = v;
      }
    }

    Rng nr(mix_seed(draw_key, kNoiseSalt, sample_key(smp.episode, smp.t)));
    ks[i] = 1 + static_cast<int>(nr.next_u64() % cfg.diffusion_steps);
    std::vector<double> eps(static_cast<size_t>(A) * H);
    for (auto& e : eps) e = nr.normal();
    const std::vector<double> a0_i(a0.begin() + static_cast<size_t>(i) * A * H,
                                   a0.begin() + static_cast<size_t>(i + 1) * A * H);
    const auto noisy = sched::forward_noise(p_.schedule(), a0_i, ks[i], eps);
    std::copy(noisy.begin(), noisy.end(), a_noisy.begin() + static_cast<size_t>(i) * A * H);
  }

  nets::PolicyNet& net = p_.net();
  const auto pred = net.forward(images, proprio, a_noisy, ks, n);
  std::vector<double> dpred;
  const double loss = nets::mse_loss(pred, a0, update ? &dpred : nullptr);
  if (!std::isfinite(loss)) throw TrainingDivergedError("non-finite training loss");

  if (update) {
    p_.params().zero_grads();
    net.backward(dpred);
    opt_.set_lr(lr);
    opt_.step(p_.params());
    p_.ema().update(p_.params(), p_.config().ema_decay);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// fit

TrainedPolicy fit(const data::Dataset& ds, const PolicyConfig& cfg, const FitOptions& opts) {
  cfg.validate();
  if (ds.episodes.empty()) throw std::invalid_argument("dataset has no episodes");
  size_t total_samples = 0;
  for (const auto& ep : ds.episodes) total_samples += static_cast<size_t>(ep.steps);
  if (total_samples == 0) throw std::invalid_argument("dataset has no steps");

  TrainedPolicy p(cfg, ds.manifest.action_dim, ds.manifest.proprio_dim, ds.manifest.stats);
  p.task = ds.manifest.task;
  p.prompt = ds.manifest.prompt;

  const int bpe = static_cast<int>((total_samples + cfg.batch_size - 1) / cfg.batch_size);
  const int total_steps = cfg.epochs * bpe;

  std::ofstream log;
  if (!opts.log_path.empty()) {
    log.open(opts.log_path);
    if (!log) throw IoError("cannot open training log: " + opts.log_path);
  }

  Trainer tr(p);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng brng(mix_seed(cfg.seed, kBatchSalt, static_cast<uint64_t>(epoch)));
    const uint64_t draw_key = mix_seed(cfg.seed, static_cast<uint64_t>(epoch));
    double loss_sum = 0.0;
    double lr = 0.0;
    for (int b = 0; b < bpe; ++b) {
      const auto batch =
          data::sample_batch(ds, cfg.batch_size, cfg.n_obs, cfg.pred_horizon, brng);
      ++step;
      lr = lr_at_step(cfg, step, total_steps);
      loss_sum += tr.train_step(ds, batch, draw_key, lr);
    }
    const double mean_loss = loss_sum / bpe;
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    if (log || opts.verbose) {
      json line;
      line["epoch"] = epoch;
      line["mean_loss"] = mean_loss;
      line["lr"] = lr;
      line["wall_ms"] = ms;
      if (log) log << line.dump() << "\n" << std::flush;
      if (opts.verbose) std::cerr << line.dump() << "\n";
    }
  }

  p.sync_inference_weights();
  return p;
}

// ---------------------------------------------------------------------------
// predict_action

std::vector<double> predict_action(TrainedPolicy& p, const ObsWindow& win, Rng& rng) {
  const PolicyConfig& cfg = p.config();
  if (static_cast<int>(win.frames.size()) != cfg.n_obs) {
    throw std::invalid_argument("observation window must hold n_obs frames");
  }
  const int A = p.action_dim();
  const int P = p.proprio_dim();
  const int H = cfg.pred_horizon;
  const data::DatasetStats& st = p.stats();

  const auto images = build_observation(win, cfg.variant, cfg.image_size);
  std::vector<double> proprio(static_cast<size_t>(cfg.n_obs) * P);
  for (int j = 0; j < cfg.n_obs; ++j) {
    if (static_cast<int>(win.frames[j].proprio.size()) != P) {
      throw std::invalid_argument("observation frame proprio dim mismatch");
    }
    for (int d = 0; d < P; ++d) {
      proprio[static_cast<size_t>(j) * P + d] =
          data::normalize_value(win.frames[j].proprio[d], st.proprio_min[d], st.proprio_max[d]);
    }
  }

  nets::PolicyNet& net = p.inference_net();
  const sched::DenoiseFn fn = [&](const std::vector<double>& a_k, int k) {
    auto x0 = net.forward(images, proprio, a_k, {k}, 1);
    for (auto& v : x0) v = std::clamp(v, -1.0, 1.0);
    return x0;
  };
  const auto x0 =
      sched::sample_chain(p.schedule(), fn, static_cast<size_t>(A) * H, cfg.n_infer_steps,
                          cfg.eta, rng);

  std::vector<double> out(static_cast<size_t>(H) * A);
  for (int t = 0; t < H; ++t) {
    for (int d = 0; d < A; ++d) {
      out[static_cast<size_t>(t) * A + d] = data::denormalize_value(
          x0[static_cast<size_t>(d) * H + t], st.action_min[d], st.action_max[d]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& s, size_t& pos) {
  if (pos + 4 > s.size()) throw CorruptionError("checkpoint truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

void put_tensor(std::string& out, const std::string& name, const std::vector<int>& shape,
                const std::vector<double>& w) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(shape.size()));
  for (int d : shape) put_u32(out, static_cast<uint32_t>(d));
  for (double v : w) {
    const float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainedPolicy& p) {
  json header;
  header["version"] = 1;
  header["config"] = json::parse(config_to_json(p.config()));
  header["action_dim"] = p.action_dim();
  header["proprio_dim"] = p.proprio_dim();
  header["task"] = p.task;
  header["prompt"] = p.prompt;
  header["stats"] = {{"action_min", p.stats().action_min},
                     {"action_max", p.stats().action_max},
                     {"proprio_min", p.stats().proprio_min},
                     {"proprio_max", p.stats().proprio_max}};
  const std::string htext = header.dump();

  std::string out(kCkptMagic, sizeof(kCkptMagic));
  put_u32(out, static_cast<uint32_t>(htext.size()));
  out.append(htext);

  const auto& params = p.params().all();
  put_u32(out, static_cast<uint32_t>(2 * params.size()));
  for (const auto& [name, prm] : params) put_tensor(out, name, prm.shape, prm.w);
  for (const auto& [name, prm] : params) {
    put_tensor(out, "ema/" + name, prm.shape, p.ema().tensors().at(name));
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("checkpoint write failed: " + path);
}

TrainedPolicy load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kCkptMagic) ||
      std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0) {
    throw UnsupportedFormatError("not a policy checkpoint: " + path);
  }
  size_t pos = sizeof(kCkptMagic);
  const uint32_t hlen = get_u32(buf, pos);
  if (pos + hlen > buf.size()) throw CorruptionError("checkpoint truncated");
  json header;
  try {
    header = json::parse(buf.substr(pos, hlen));
  } catch (const json::exception&) {
    throw CorruptionError("checkpoint header is not valid JSON");
  }
  pos += hlen;

  try {
    if (header.at("version").get<int>() != 1) {
      throw UnsupportedFormatError("unsupported checkpoint version");
    }
    const PolicyConfig cfg = config_from_json(header.at("config").dump());
    data::DatasetStats stats;
    stats.action_min = header.at("stats").at("action_min").get<std::vector<float>>();
    stats.action_max = header.at("stats").at("action_max").get<std::vector<float>>();
    stats.proprio_min = header.at("stats").at("proprio_min").get<std::vector<float>>();
    stats.proprio_max = header.at("stats").at("proprio_max").get<std::vector<float>>();

    TrainedPolicy p(cfg, header.at("action_dim"), header.at("proprio_dim"), stats);
    p.task = header.value("task", "");
    p.prompt = header.value("prompt", "");

    const uint32_t n_tensors = get_u32(buf, pos);
    for (uint32_t i = 0; i < n_tensors; ++i) {
      const uint32_t name_len = get_u32(buf, pos);
      if (pos + name_len > buf.size()) throw CorruptionError("checkpoint truncated");
      const std::string name = buf.substr(pos, name_len);
      pos += name_len;
      const uint32_t ndim = get_u32(buf, pos);
      size_t count = 1;
      for (uint32_t d = 0; d < ndim; ++d) count *= get_u32(buf, pos);
      std::vector<double> w(count);
      for (size_t e = 0; e < count; ++e) {
        const uint32_t bits = get_u32(buf, pos);
        float fv;
        std::memcpy(&fv, &bits, 4);
        w[e] = fv;
      }
      const bool is_ema = name.rfind("ema/", 0) == 0;
      const std::string base = is_ema ? name.substr(4) : name;
      if (!p.params().contains(base)) throw CorruptionError("unknown checkpoint tensor: " + name);
      if (p.params().at(base).size() != count) {
        throw CorruptionError("checkpoint tensor size mismatch: " + name);
      }
      if (is_ema) {
        p.ema().tensors().at(base) = std::move(w);
      } else {
        p.params().at(base).w = std::move(w);
      }
    }
    p.sync_inference_weights();
    return p;
  } catch (const json::exception&) {
    throw CorruptionError("checkpoint header missing fields");
  }
}

}  // namespace s2diff::policy
