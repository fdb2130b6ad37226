// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "s2diff/data.hpp"
#include "s2diff/errors.hpp"
#include "s2diff/rng.hpp"

using namespace s2diff;
using namespace s2diff::data;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("s2diff_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

Episode random_episode(uint64_t seed, int steps = 7, int pdim = 2, int adim = 2) {
  Rng rng(seed);
  Episode ep;
  ep.steps = steps;
  ep.proprio_dim = pdim;
  ep.action_dim = adim;
  const size_t frame = static_cast<size_t>(sim::kFrame) * sim::kFrame;
  ep.rgb.resize(steps * frame * 3);
  for (auto& b : ep.rgb) b = static_cast<uint8_t>(rng.next_u64() & 0xff);
  ep.gt_mask.resize(steps * frame);
  ep.gt_depth.resize(steps * frame);
  for (auto& v : ep.gt_mask) v = static_cast<float>(rng.uniform());
  for (auto& v : ep.gt_depth) v = static_cast<float>(rng.uniform());
  ep.proprio.resize(static_cast<size_t>(steps) * pdim);
  ep.action.resize(static_cast<size_t>(steps) * adim);
  for (auto& v : ep.proprio) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (auto& v : ep.action) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return ep;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

RecordOptions wiping_opts(const fs::path& dir, int episodes = 3) {
  RecordOptions o;
  o.instance = {sim::Task::kWiping, "red", 0};
  o.episodes = episodes;
  o.seed = 0;
  o.out_dir = dir.string();
  return o;
}

}  // namespace

TEST_CASE("episode files round trip exactly") {
  TmpDir tmp("roundtrip");
  const Episode ep = random_episode(1);
  const auto path = (tmp.path / "ep.bin").string();
  save_episode(path, ep);
  const Episode back = load_episode(path);
  CHECK(back.steps == ep.steps);
  CHECK(back.rgb == ep.rgb);
  CHECK(back.gt_mask == ep.gt_mask);
  CHECK(back.gt_depth == ep.gt_depth);
  CHECK(back.proprio == ep.proprio);
  CHECK(back.action == ep.action);
}

TEST_CASE("flipped payload bytes are caught by checksums") {
  TmpDir tmp("corrupt");
  const auto path = (tmp.path / "ep.bin").string();
  save_episode(path, random_episode(2));
  std::string bytes = slurp(path);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
  spit(path, bytes);
  CHECK_THROWS_AS(load_episode(path), CorruptionError);
}

TEST_CASE("truncated files are rejected") {
  TmpDir tmp("trunc");
  const auto path = (tmp.path / "ep.bin").string();
  save_episode(path, random_episode(3));
  std::string bytes = slurp(path);
  spit(path, bytes.substr(0, bytes.size() - 9));
  CHECK_THROWS_AS(load_episode(path), CorruptionError);
}

TEST_CASE("foreign files are rejected by magic") {
  TmpDir tmp("magic");
  const auto path = (tmp.path / "ep.bin").string();
  spit(path, "PNGISH garbage that is long enough to hold a header");
  CHECK_THROWS_AS(load_episode(path), UnsupportedFormatError);
}

TEST_CASE("recording keeps successful expert episodes with a manifest") {
  TmpDir tmp("record");
  const Manifest mf = record_demos(wiping_opts(tmp.path));
  REQUIRE(mf.episodes.size() == 3);
  CHECK(mf.task == "wiping");
  CHECK(mf.prompt == "handwriting. sponge.");
  CHECK(mf.action_dim == 2);
  CHECK(mf.proprio_dim == 2);
  for (const auto& e : mf.episodes) {
    CHECK(e.steps > 0);
    CHECK(e.steps <= sim::kWipingStepLimit);
    CHECK(fs::exists(tmp.path / e.file));
  }
  for (int d = 0; d < 2; ++d) {
    CHECK(mf.stats.action_min[d] < mf.stats.action_max[d]);
    CHECK(mf.stats.action_min[d] >= -1.0f);
    CHECK(mf.stats.action_max[d] <= 1.0f);
  }

  const Dataset ds = load_dataset(tmp.path.string());
  REQUIRE(ds.episodes.size() == 3);
  CHECK(ds.episodes[0].steps == mf.episodes[0].steps);
}

TEST_CASE("re-recording the same options is byte-identical") {
  TmpDir a("rec_a"), b("rec_b");
  record_demos(wiping_opts(a.path, 2));
  record_demos(wiping_opts(b.path, 2));
  CHECK(slurp(a.path / "manifest.json") == slurp(b.path / "manifest.json"));
  CHECK(slurp(a.path / "ep_0000.bin") == slurp(b.path / "ep_0000.bin"));
  CHECK(slurp(a.path / "ep_0001.bin") == slurp(b.path / "ep_0001.bin"));
}

TEST_CASE("an impossible step budget trips the misconfiguration guard") {
  TmpDir tmp("fail");
  RecordOptions o = wiping_opts(tmp.path, 2);
  o.step_limit_override = 1;
  CHECK_THROWS_AS(record_demos(o), EnvMisconfiguredError);
}

TEST_CASE("manifest version gate") {
  TmpDir tmp("ver");
  record_demos(wiping_opts(tmp.path, 2));
  std::string text = slurp(tmp.path / "manifest.json");
  const auto pos = text.find("\"format_version\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 19, "\"format_version\": 9");
  spit(tmp.path / "manifest.json", text);
  CHECK_THROWS_AS(load_dataset(tmp.path.string()), UnsupportedFormatError);
}

TEST_CASE("window clamping and chunk padding") {
  TmpDir tmp("windows");
  Dataset ds;
  ds.manifest.action_dim = 2;
  ds.manifest.proprio_dim = 2;
  ds.manifest.stats.action_min = {-1.0f, -1.0f};
  ds.manifest.stats.action_max = {1.0f, 1.0f};
  Episode ep = random_episode(4, 5);
  for (int t = 0; t < 5; ++t) {
    ep.action[t * 2 + 0] = static_cast<float>(t) / 10.0f;  // distinguishable per step
    ep.action[t * 2 + 1] = -static_cast<float>(t) / 10.0f;
  }
  ds.episodes.push_back(ep);

  const Sample s0 = make_sample(ds, 0, 0, 2, 4);
  CHECK(s0.obs_t == std::vector<int>{0, 0});
  CHECK(s0.padded == std::vector<uint8_t>{0, 0, 0, 0});

  const Sample s3 = make_sample(ds, 0, 3, 2, 4);
  CHECK(s3.obs_t == std::vector<int>{2, 3});
  CHECK(s3.padded == std::vector<uint8_t>{0, 0, 1, 1});
  // Padded entries repeat the final action.
  CHECK(s3.action_chunk[2 * 2 + 0] == doctest::Approx(0.4));
  CHECK(s3.action_chunk[3 * 2 + 0] == doctest::Approx(0.4));
  CHECK(s3.action_chunk[0 * 2 + 0] == doctest::Approx(0.3));

  CHECK_THROWS_AS(make_sample(ds, 0, 5, 2, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_sample(ds, 1, 0, 2, 4), std::invalid_argument);
}

TEST_CASE("normalization maps stats range onto [-1, 1] and back") {
  CHECK(normalize_value(2.0, 2.0, 6.0) == doctest::Approx(-1.0));
  CHECK(normalize_value(6.0, 2.0, 6.0) == doctest::Approx(1.0));
  CHECK(normalize_value(4.0, 2.0, 6.0) == doctest::Approx(0.0));
  CHECK(denormalize_value(normalize_value(3.3, 2.0, 6.0), 2.0, 6.0) == doctest::Approx(3.3));
  // Degenerate range collapses to the midpoint code.
  CHECK(normalize_value(5.0, 5.0, 5.0) == 0.0);
  CHECK(denormalize_value(0.7, 5.0, 5.0) == 5.0);
}

TEST_CASE("batch sampling stays in range and is seed-deterministic") {
  TmpDir tmp("batch");
  record_demos(wiping_opts(tmp.path, 2));
  const Dataset ds = load_dataset(tmp.path.string());

  Rng r1(5), r2(5);
  const auto b1 = sample_batch(ds, 16, 2, 8, r1);
  const auto b2 = sample_batch(ds, 16, 2, 8, r2);
  REQUIRE(b1.size() == 16);
  for (size_t i = 0; i < b1.size(); ++i) {
    CHECK(b1[i].episode == b2[i].episode);
    CHECK(b1[i].t == b2[i].t);
    CHECK(b1[i].action_chunk == b2[i].action_chunk);
    for (double v : b1[i].action_chunk) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
}
