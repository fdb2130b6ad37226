// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "s2diff/errors.hpp"
#include "s2diff/fusion.hpp"
#include "s2diff/percept.hpp"

namespace s2diff::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kMagic[16] = {'S', '2', 'E', 'P', 'I', 'S', 'O', 'D', 'E', '\0'};
constexpr uint64_t kJitterSalt = 0x4a175eedull;

uint32_t crc_of(const void* data, size_t n) {
  return static_cast<uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& in, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(in[off + i])) << (8 * i);
  return v;
}

struct ArraySpec {
  const char* name;
  const char* dtype;
  std::vector<int64_t> shape;
  const void* data;
  size_t bytes;
};

std::vector<ArraySpec> episode_arrays(const Episode& ep) {
  const int64_t T = ep.steps;
  return {
      {"rgb", "u8", {T, sim::kFrame, sim::kFrame, 3}, ep.rgb.data(), ep.rgb.size()},
      {"gt_mask", "f32", {T, sim::kFrame, sim::kFrame}, ep.gt_mask.data(),
       ep.gt_mask.size() * 4},
      {"gt_depth", "f32", {T, sim::kFrame, sim::kFrame}, ep.gt_depth.data(),
       ep.gt_depth.size() * 4},
      {"proprio", "f32", {T, ep.proprio_dim}, ep.proprio.data(), ep.proprio.size() * 4},
      {"action", "f32", {T, ep.action_dim}, ep.action.data(), ep.action.size() * 4},
  };
}

void check_episode_shapes(const Episode& ep) {
  const size_t T = static_cast<size_t>(ep.steps);
  const size_t frame = static_cast<size_t>(sim::kFrame) * sim::kFrame;
  if (ep.steps <= 0 || ep.proprio_dim <= 0 || ep.action_dim <= 0 ||
      ep.rgb.size() != T * frame * 3 || ep.gt_mask.size() != T * frame ||
      ep.gt_depth.size() != T * frame || ep.proprio.size() != T * ep.proprio_dim ||
      ep.action.size() != T * ep.action_dim) {
    throw std::invalid_argument("episode arrays disagree with declared dims");
  }
}

}  // namespace

void save_episode(const std::string& path, const Episode& ep) {
  check_episode_shapes(ep);
  const auto arrays = episode_arrays(ep);

  json header;
  header["version"] = 1;
  header["arrays"] = json::array();
  size_t offset = 0;
  for (const auto& a : arrays) {
    header["arrays"].push_back(
        {{"name", a.name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset}});
    offset += a.bytes + 4;  // trailing crc32
  }
  const std::string header_text = header.dump();

  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<uint32_t>(header_text.size()));
  out += header_text;
  for (const auto& a : arrays) {
    out.append(static_cast<const char*>(a.data), a.bytes);
    put_u32(out, crc_of(a.data, a.bytes));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

Episode load_episode(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof(kMagic) + 4 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw UnsupportedFormatError("not an episode file: " + path);
  }
  const uint32_t header_len = get_u32(bytes, sizeof(kMagic));
  const size_t data_start = sizeof(kMagic) + 4 + header_len;
  if (bytes.size() < data_start) throw CorruptionError("truncated header: " + path);

  const json header = json::parse(bytes.substr(sizeof(kMagic) + 4, header_len), nullptr, false);
  if (header.is_discarded()) throw CorruptionError("unreadable header: " + path);
  if (header.value("version", 0) != 1) {
    throw UnsupportedFormatError("unsupported episode version in " + path);
  }

  Episode ep;
  auto read_array = [&](const char* name, const char* dtype, auto& dst,
                        std::vector<int64_t>* shape_out) {
    for (const auto& a : header.at("arrays")) {
      if (a.at("name") != name) continue;
      if (a.at("dtype") != dtype) throw CorruptionError(std::string("bad dtype for ") + name);
      const auto shape = a.at("shape").get<std::vector<int64_t>>();
      int64_t count = 1;
      for (int64_t d : shape) {
        if (d <= 0) throw CorruptionError(std::string("bad shape for ") + name);
        count *= d;
      }
      using T = typename std::decay_t<decltype(dst)>::value_type;
      const size_t nbytes = static_cast<size_t>(count) * sizeof(T);
      const size_t off = data_start + a.at("offset").get<size_t>();
      if (off + nbytes + 4 > bytes.size()) throw CorruptionError("truncated data: " + path);
      if (crc_of(bytes.data() + off, nbytes) != get_u32(bytes, off + nbytes)) {
        throw CorruptionError(std::string("checksum mismatch in array ") + name + ": " + path);
      }
      dst.resize(static_cast<size_t>(count));
      std::memcpy(dst.data(), bytes.data() + off, nbytes);
      *shape_out = shape;
      return;
    }
    throw CorruptionError(std::string("missing array ") + name + ": " + path);
  };

  std::vector<int64_t> s_rgb, s_mask, s_depth, s_prop, s_act;
  read_array("rgb", "u8", ep.rgb, &s_rgb);
  read_array("gt_mask", "f32", ep.gt_mask, &s_mask);
  read_array("gt_depth", "f32", ep.gt_depth, &s_depth);
  read_array("proprio", "f32", ep.proprio, &s_prop);
  read_array("action", "f32", ep.action, &s_act);

  if (s_rgb.size() != 4 || s_rgb[1] != sim::kFrame || s_rgb[2] != sim::kFrame || s_rgb[3] != 3 ||
      s_mask.size() != 3 || s_depth.size() != 3 || s_prop.size() != 2 || s_act.size() != 2 ||
      s_mask[0] != s_rgb[0] || s_depth[0] != s_rgb[0] || s_prop[0] != s_rgb[0] ||
      s_act[0] != s_rgb[0]) {
    throw CorruptionError("inconsistent array shapes: " + path);
  }
  ep.steps = static_cast<int>(s_rgb[0]);
  ep.proprio_dim = static_cast<int>(s_prop[1]);
  ep.action_dim = static_cast<int>(s_act[1]);
  check_episode_shapes(ep);
  return ep;
}

double normalize_value(double v, double lo, double hi) {
  if (hi - lo < 1e-8) return 0.0;
  return 2.0 * (v - lo) / (hi - lo) - 1.0;
}

double denormalize_value(double u, double lo, double hi) {
  if (hi - lo < 1e-8) return lo;
  return lo + (u + 1.0) / 2.0 * (hi - lo);
}

Manifest record_demos(const RecordOptions& opts) {
  if (opts.episodes <= 0) throw std::invalid_argument("episodes must be positive");
  if (opts.out_dir.empty()) throw std::invalid_argument("out_dir must be set");
  const std::string prompt_text =
      opts.prompt.empty() ? sim::default_prompt(opts.instance.category) : opts.prompt;
  const auto prompt = percept::PerceptionPrompt::parse(prompt_text);

  auto env = sim::make_env(opts.instance.category);
  fs::create_directories(opts.out_dir);

  std::vector<Episode> kept;
  std::vector<uint64_t> kept_seeds;
  const int max_attempts = 2 * opts.episodes;
  for (int attempt = 0; attempt < max_attempts &&
                        static_cast<int>(kept.size()) < opts.episodes; ++attempt) {
    const uint64_t seed = opts.seed + attempt;
    sim::EnvObs obs = env->reset(opts.instance, seed);
    Rng jitter(mix_seed(seed, kJitterSalt));

    Episode ep;
    ep.proprio_dim = env->proprio_dim();
    ep.action_dim = env->action_dim();
    sim::StepOutcome out;
    do {
      const auto gt = env->ground_truth_perception(prompt);
      const fusion::FusedMask fused = fusion::fuse_masks(gt.masks);
      const std::vector<double> act = env->expert_action(jitter);

      ep.rgb.insert(ep.rgb.end(), obs.rgb.data.begin(), obs.rgb.data.end());
      ep.gt_mask.insert(ep.gt_mask.end(), fused.values.v.begin(), fused.values.v.end());
      ep.gt_depth.insert(ep.gt_depth.end(), gt.raw_depth.v.begin(), gt.raw_depth.v.end());
      for (double p : obs.proprio) ep.proprio.push_back(static_cast<float>(p));
      for (double a : act) ep.action.push_back(static_cast<float>(a));
      ++ep.steps;

      out = env->step(act);
      obs = out.obs;
    } while (!out.done &&
             (opts.step_limit_override <= 0 || out.steps < opts.step_limit_override));

    if (env->success()) {
      kept.push_back(std::move(ep));
      kept_seeds.push_back(seed);
    }
  }
  if (static_cast<int>(kept.size()) < opts.episodes) {
    throw EnvMisconfiguredError(
        "expert failed more than half of " + std::to_string(max_attempts) +
        " attempts; kept only " + std::to_string(kept.size()) + " episodes");
  }

  Manifest mf;
  mf.task = sim::to_string(opts.instance.category);
  mf.prompt = prompt_text;
  mf.render_style = opts.instance.render_style;
  mf.background_seed = opts.instance.background_seed;
  mf.action_dim = kept.front().action_dim;
  mf.proprio_dim = kept.front().proprio_dim;
  mf.stats.action_min.assign(mf.action_dim, std::numeric_limits<float>::max());
  mf.stats.action_max.assign(mf.action_dim, std::numeric_limits<float>::lowest());
  mf.stats.proprio_min.assign(mf.proprio_dim, std::numeric_limits<float>::max());
  mf.stats.proprio_max.assign(mf.proprio_dim, std::numeric_limits<float>::lowest());

  for (size_t i = 0; i < kept.size(); ++i) {
    const Episode& ep = kept[i];
    char name[32];
    std::snprintf(name, sizeof(name), "ep_%04zu.bin", i);
    save_episode((fs::path(opts.out_dir) / name).string(), ep);
    mf.episodes.push_back({name, kept_seeds[i], ep.steps});

    for (int t = 0; t < ep.steps; ++t) {
      for (int d = 0; d < mf.action_dim; ++d) {
        const float v = ep.action[t * mf.action_dim + d];
        mf.stats.action_min[d] = std::min(mf.stats.action_min[d], v);
        mf.stats.action_max[d] = std::max(mf.stats.action_max[d], v);
      }
      for (int d = 0; d < mf.proprio_dim; ++d) {
        const float v = ep.proprio[t * mf.proprio_dim + d];
        mf.stats.proprio_min[d] = std::min(mf.stats.proprio_min[d], v);
        mf.stats.proprio_max[d] = std::max(mf.stats.proprio_max[d], v);
      }
    }
  }

  json j;
  j["format_version"] = mf.format_version;
  j["task"] = mf.task;
  j["prompt"] = mf.prompt;
  j["instance"] = {{"render_style", mf.render_style},
                   {"background_seed", mf.background_seed}};
  j["action_dim"] = mf.action_dim;
  j["proprio_dim"] = mf.proprio_dim;
  j["episodes"] = json::array();
  for (const auto& e : mf.episodes) {
    j["episodes"].push_back({{"file", e.file}, {"seed", e.seed}, {"steps", e.steps}});
  }
  j["stats"] = {{"action_min", mf.stats.action_min},
                {"action_max", mf.stats.action_max},
                {"proprio_min", mf.stats.proprio_min},
                {"proprio_max", mf.stats.proprio_max}};

  std::ofstream f(fs::path(opts.out_dir) / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write manifest in " + opts.out_dir);
  f << j.dump(2) << "\n";
  return mf;
}

Dataset load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw IoError("cannot open: " + mpath.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw CorruptionError("unreadable manifest: " + mpath.string());
  if (j.value("format_version", 0) != 1) {
    throw UnsupportedFormatError("unsupported manifest format_version in " + mpath.string());
  }

  Dataset ds;
  Manifest& mf = ds.manifest;
  try {
    mf.task = j.at("task").get<std::string>();
    mf.prompt = j.at("prompt").get<std::string>();
    mf.render_style = j.at("instance").at("render_style").get<std::string>();
    mf.background_seed = j.at("instance").at("background_seed").get<uint64_t>();
    mf.action_dim = j.at("action_dim").get<int>();
    mf.proprio_dim = j.at("proprio_dim").get<int>();
    for (const auto& e : j.at("episodes")) {
      mf.episodes.push_back({e.at("file").get<std::string>(), e.at("seed").get<uint64_t>(),
                             e.at("steps").get<int>()});
    }
    mf.stats.action_min = j.at("stats").at("action_min").get<std::vector<float>>();
    mf.stats.action_max = j.at("stats").at("action_max").get<std::vector<float>>();
    mf.stats.proprio_min = j.at("stats").at("proprio_min").get<std::vector<float>>();
    mf.stats.proprio_max = j.at("stats").at("proprio_max").get<std::vector<float>>();
  } catch (const json::exception& e) {
    throw CorruptionError("manifest missing fields: " + std::string(e.what()));
  }
  if (mf.episodes.empty()) throw CorruptionError("manifest lists no episodes");

  for (const auto& ref : mf.episodes) {
    Episode ep = load_episode((fs::path(dir) / ref.file).string());
    if (ep.steps != ref.steps || ep.action_dim != mf.action_dim ||
        ep.proprio_dim != mf.proprio_dim) {
      throw CorruptionError("episode disagrees with manifest: " + ref.file);
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

Sample make_sample(const Dataset& ds, int episode, int t, int n_obs, int pred_horizon) {
  if (n_obs < 1 || pred_horizon < 1) {
    throw std::invalid_argument("n_obs and pred_horizon must be positive");
  }
  if (episode < 0 || episode >= static_cast<int>(ds.episodes.size())) {
    throw std::invalid_argument("episode index out of range");
  }
  const Episode& ep = ds.episodes[episode];
  if (t < 0 || t >= ep.steps) throw std::invalid_argument("time index out of range");

  Sample s;
  s.episode = episode;
  s.t = t;
  for (int j = 0; j < n_obs; ++j) {
    s.obs_t.push_back(std::max(0, t - n_obs + 1 + j));
  }
  const auto& st = ds.manifest.stats;
  s.action_chunk.resize(static_cast<size_t>(pred_horizon) * ep.action_dim);
  s.padded.resize(pred_horizon);
  for (int i = 0; i < pred_horizon; ++i) {
    const int idx = std::min(t + i, ep.steps - 1);
    s.padded[i] = t + i >= ep.steps ? 1 : 0;
    for (int d = 0; d < ep.action_dim; ++d) {
      s.action_chunk[static_cast<size_t>(i) * ep.action_dim + d] =
          normalize_value(ep.action[static_cast<size_t>(idx) * ep.action_dim + d],
                          st.action_min[d], st.action_max[d]);
    }
  }
  return s;
}

std::vector<Sample> sample_batch(const Dataset& ds, int batch_size, int n_obs,
                                 int pred_horizon, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (ds.episodes.empty()) throw std::invalid_argument("dataset is empty");
  std::vector<Sample> out;
  out.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) {
    const int e = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(ds.episodes.size()) - 1));
    const int t = static_cast<int>(rng.uniform_int(0, ds.episodes[e].steps - 1));
    out.push_back(make_sample(ds, e, t, n_obs, pred_horizon));
  }
  return out;
}

}  // namespace s2diff::data
