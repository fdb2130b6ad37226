// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "s2diff/rng.hpp"
#include "s2diff/sim.hpp"

using namespace s2diff;
using namespace s2diff::sim;

namespace {

InstanceSpec wiping_instance(const std::string& style = "red", uint64_t bg = 0) {
  return InstanceSpec{Task::kWiping, style, bg};
}

InstanceSpec scooping_instance(const std::string& style = "rice", uint64_t bg = 0) {
  return InstanceSpec{Task::kScooping, style, bg};
}

int run_expert(Env& env, const InstanceSpec& instance, uint64_t seed, bool& ok) {
  env.reset(instance, seed);
  Rng rng(mix_seed(seed, 0xE0ull));
  StepOutcome out;
  do {
    out = env.step(env.expert_action(rng));
  } while (!out.done);
  ok = out.success;
  return out.steps;
}

}  // namespace

TEST_CASE("reset is deterministic in the seed") {
  Scrub2DEnv a, b;
  const EnvObs oa = a.reset(wiping_instance(), 7);
  const EnvObs ob = b.reset(wiping_instance(), 7);
  CHECK(oa.rgb.data == ob.rgb.data);
  CHECK(oa.proprio == ob.proprio);
  CHECK(a.state().scribble == b.state().scribble);

  const EnvObs oc = b.reset(wiping_instance(), 8);
  CHECK(oc.rgb.data != oa.rgb.data);
}

TEST_CASE("render style changes pixels but not state or perception") {
  Scrub2DEnv red, green;
  const EnvObs o_red = red.reset(wiping_instance("red"), 3);
  const EnvObs o_green = green.reset(wiping_instance("green"), 3);

  CHECK(o_red.rgb.data != o_green.rgb.data);
  CHECK(red.state().scribble == green.state().scribble);
  CHECK(red.state().ee_x == green.state().ee_x);

  const auto prompt = percept::PerceptionPrompt::parse(default_prompt(Task::kWiping));
  const auto p_red = red.ground_truth_perception(prompt);
  const auto p_green = green.ground_truth_perception(prompt);
  REQUIRE(p_red.masks.masks.size() == p_green.masks.masks.size());
  for (size_t i = 0; i < p_red.masks.masks.size(); ++i) {
    CHECK(p_red.masks.masks[i].v == p_green.masks.masks[i].v);
  }
  CHECK(p_red.raw_depth.v == p_green.raw_depth.v);
}

TEST_CASE("background seed changes pixels only") {
  Scoop2DEnv a, b;
  const EnvObs oa = a.reset(scooping_instance("rice", 1), 5);
  const EnvObs ob = b.reset(scooping_instance("rice", 2), 5);
  CHECK(oa.rgb.data != ob.rgb.data);
  CHECK(a.state().src_cx == b.state().src_cx);
  const auto prompt = percept::PerceptionPrompt::parse(default_prompt(Task::kScooping));
  CHECK(a.ground_truth_perception(prompt).raw_depth.v ==
        b.ground_truth_perception(prompt).raw_depth.v);
}

TEST_CASE("category mismatch on reset throws") {
  Scrub2DEnv env;
  CHECK_THROWS_AS(env.reset(scooping_instance(), 0), std::invalid_argument);
  Scoop2DEnv env2;
  CHECK_THROWS_AS(env2.reset(wiping_instance(), 0), std::invalid_argument);
}

TEST_CASE("unknown render style throws") {
  Scrub2DEnv env;
  CHECK_THROWS_AS(env.reset(InstanceSpec{Task::kWiping, "plaid", 0}, 0),
                  std::invalid_argument);
}

TEST_CASE("scooping reset puts every particle inside the source bowl") {
  Scoop2DEnv env;
  for (uint64_t seed : {0ull, 3ull, 11ull}) {
    env.reset(scooping_instance(), seed);
    const auto& st = env.state();
    REQUIRE(static_cast<int>(st.particles.size()) == kParticleCount);
    for (const Particle& p : st.particles) {
      const double dx = p.x - st.src_cx;
      const double dy = p.y - st.src_cy;
      CHECK(std::sqrt(dx * dx + dy * dy) <= st.bowl_r);
      CHECK(!p.carried);
    }
    CHECK(env.particles_in_target() == 0);
    CHECK(!env.success());
  }
}

TEST_CASE("actions are validated and clamped") {
  Scrub2DEnv env;
  env.reset(wiping_instance(), 1);
  CHECK_THROWS_AS(env.step({1.0}), std::invalid_argument);
  CHECK_THROWS_AS(env.step({1.0, std::nan("")}), std::invalid_argument);

  // A huge command moves at most kDt world units per step.
  const double x0 = env.state().ee_x;
  env.step({1000.0, 0.0});
  CHECK(env.state().ee_x == doctest::Approx(std::min(1.0, x0 + kDt)));

  // Position stays inside the unit square.
  for (int i = 0; i < 30; ++i) env.step({1.0, 1.0});
  CHECK(env.state().ee_x == 1.0);
  CHECK(env.state().ee_y == 1.0);
}

TEST_CASE("wiping clears cells under the tool and never regresses") {
  Scrub2DEnv env;
  env.reset(wiping_instance(), 2);
  Rng rng(99);
  int prev_remaining = env.state().initial_cells;
  for (int i = 0; i < 60; ++i) {
    env.step(env.expert_action(rng));
    const int remaining = static_cast<int>(
        std::count(env.state().scribble.begin(), env.state().scribble.end(), 1));
    CHECK(remaining <= prev_remaining);
    prev_remaining = remaining;
  }
  CHECK(prev_remaining < env.state().initial_cells);
}

TEST_CASE("wiping expert succeeds across seeds") {
  Scrub2DEnv env;
  int wins = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    bool ok = false;
    const int steps = run_expert(env, wiping_instance(), seed, ok);
    CHECK(steps <= kWipingStepLimit);
    wins += ok ? 1 : 0;
  }
  CHECK(wins >= 19);
}

TEST_CASE("scooping expert succeeds across seeds") {
  Scoop2DEnv env;
  int wins = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    bool ok = false;
    const int steps = run_expert(env, scooping_instance(), seed, ok);
    CHECK(steps <= kScoopingStepLimit);
    wins += ok ? 1 : 0;
  }
  CHECK(wins >= 19);
}

TEST_CASE("scooping conserves particles and respects carry limits") {
  Scoop2DEnv env;
  env.reset(scooping_instance(), 6);
  Rng rng(123);
  for (int i = 0; i < 120; ++i) {
    std::vector<double> a = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                             rng.uniform(-1.0, 1.0)};
    env.step(a);
    const auto& st = env.state();
    CHECK(static_cast<int>(st.particles.size()) == kParticleCount);
    int carried = 0;
    for (const Particle& p : st.particles) {
      if (p.carried) ++carried;
      CHECK(p.x >= 0.0);
      CHECK(p.x <= 1.0);
    }
    CHECK(carried == st.carried);
    CHECK(carried <= kCarryCapacity);
    CHECK(st.tilt >= 0.0);
    CHECK(st.tilt <= 1.0);
  }
}

TEST_CASE("trajectories are reproducible from seed and actions") {
  Scoop2DEnv a, b;
  a.reset(scooping_instance(), 17);
  b.reset(scooping_instance(), 17);
  Rng ra(55), rb(55);
  EnvObs last_a, last_b;
  for (int i = 0; i < 80; ++i) {
    std::vector<double> act = {ra.uniform(-1.0, 1.0), ra.uniform(-1.0, 1.0),
                               ra.uniform(-1.0, 1.0)};
    std::vector<double> act2 = {rb.uniform(-1.0, 1.0), rb.uniform(-1.0, 1.0),
                                rb.uniform(-1.0, 1.0)};
    last_a = a.step(act).obs;
    last_b = b.step(act2).obs;
  }
  CHECK(last_a.rgb.data == last_b.rgb.data);
  CHECK(last_a.proprio == last_b.proprio);
}

TEST_CASE("ground-truth masks follow the term vocabulary") {
  Scrub2DEnv env;
  env.reset(wiping_instance(), 4);
  const auto res = env.ground_truth_perception(
      percept::PerceptionPrompt::parse("handwriting. sponge. banana."));
  REQUIRE(res.masks.labels.size() == 3);

  // Scribble mask matches occupancy exactly, ignoring tool occlusion.
  const auto& hw = res.masks.masks[0];
  for (int i = 0; i < kFrame * kFrame; ++i) {
    CHECK(hw.v[i] == (env.state().scribble[i] ? 1.0f : 0.0f));
  }

  // Unknown term yields an all-zero mask.
  const auto& banana = res.masks.masks[2];
  CHECK(std::all_of(banana.v.begin(), banana.v.end(), [](float v) { return v == 0.0f; }));

  // In-mask confidence is binary for the oracle.
  for (const auto& m : res.masks.masks) {
    for (float v : m.v) CHECK((v == 0.0f || v == 1.0f));
  }
}

TEST_CASE("scooping synonyms map to the particle footprint") {
  Scoop2DEnv env;
  env.reset(scooping_instance("choco"), 9);
  const auto res = env.ground_truth_perception(
      percept::PerceptionPrompt::parse("rice. cereal. particles."));
  REQUIRE(res.masks.masks.size() == 3);
  CHECK(res.masks.masks[0].v == res.masks.masks[1].v);
  CHECK(res.masks.masks[0].v == res.masks.masks[2].v);
  // The word keys category-level footprints, not the render style.
  int nonzero = 0;
  for (float v : res.masks.masks[0].v) nonzero += v > 0.0f;
  CHECK(nonzero > 0);
}

TEST_CASE("pseudo depth layers nearest surfaces over farther ones") {
  Scoop2DEnv env;
  env.reset(scooping_instance(), 12);
  const auto& st = env.state();
  const auto res =
      env.ground_truth_perception(percept::PerceptionPrompt::parse("rice. bowl."));
  const GridF& d = res.raw_depth;

  // Tool center.
  const int tx = static_cast<int>(st.ee_x * kFrame);
  const int ty = static_cast<int>(st.ee_y * kFrame);
  CHECK(d.at(ty, tx) == 0.3f);

  // Particle inside the source bowl reads as particle, not bowl.
  const Particle& p = st.particles[0];
  CHECK(d.at(static_cast<int>(p.y * kFrame), static_cast<int>(p.x * kFrame)) == 0.6f);

  // Empty target bowl interior.
  CHECK(d.at(static_cast<int>(st.dst_cy * kFrame), static_cast<int>(st.dst_cx * kFrame)) ==
        0.7f);

  // Far background corner.
  CHECK(d.at(0, 0) == 1.0f);
}

TEST_CASE("task helpers round trip") {
  CHECK(task_from_string("wiping") == Task::kWiping);
  CHECK(task_from_string("scooping") == Task::kScooping);
  CHECK_THROWS_AS(task_from_string("stacking"), std::invalid_argument);
  CHECK(to_string(Task::kScooping) == "scooping");
  CHECK(make_env(Task::kWiping)->action_dim() == 2);
  CHECK(make_env(Task::kScooping)->action_dim() == 3);
}
