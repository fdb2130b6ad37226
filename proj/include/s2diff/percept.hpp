// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "s2diff/fusion.hpp"
#include "s2diff/image.hpp"

namespace s2diff::sim {
class Env;
}

namespace s2diff::percept {

// Period-separated noun phrases, e.g. "handwriting. sponge.".
struct PerceptionPrompt {
  std::string text;

  static PerceptionPrompt parse(const std::string& text);
  // Lowercased terms split on '.', whitespace trimmed, empties dropped.
  std::vector<std::string> terms() const;
};

struct PerceptionResult {
  fusion::SemanticMaskSet masks;
  GridF raw_depth;
  double latency_ms = 0.0;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual PerceptionResult perceive(const ImageU8& rgb, const PerceptionPrompt& prompt) = 0;
};

// Ground-truth perception read straight from a simulator instance. The rgb
// frame is ignored; masks and depth come from the env's current state.
class OracleBackend : public Backend {
 public:
  explicit OracleBackend(const sim::Env* env) : env_(env) {}
  PerceptionResult perceive(const ImageU8& rgb, const PerceptionPrompt& prompt) override;

 private:
  const sim::Env* env_;
};

struct RemoteConfig {
  std::string base_url;      // e.g. "http://127.0.0.1:8731"
  double timeout_s = 10.0;
  int max_attempts = 3;
  double backoff_s = 0.5;    // doubles per retry
};

// HTTP client for the perception service protocol. One in-flight request per
// instance; results are cached by (frame hash, prompt).
class RemoteBackend : public Backend {
 public:
  explicit RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) {}
  PerceptionResult perceive(const ImageU8& rgb, const PerceptionPrompt& prompt) override;

  size_t cache_size() const;

 private:
  RemoteConfig cfg_;
  mutable std::mutex cache_mu_;
  std::unordered_map<std::string, PerceptionResult> cache_;
};

PerceptionResult perceive(Backend& backend, const ImageU8& rgb, const PerceptionPrompt& prompt);

// Serves the perception wire protocol from a fixed fixture; test double for
// the real segmentation/depth services. Supports 5xx failure injection.
class MockPerceptionServer {
 public:
  struct Fixture {
    fusion::SemanticMaskSet masks;
    GridF depth;
  };

  MockPerceptionServer();
  ~MockPerceptionServer();

  void set_fixture(Fixture fixture);
  void fail_next(int n, int status = 500);

  // Binds to 127.0.0.1 on a free port (or the given one) and serves on a
  // background thread until stop().
  void start(int port = 0);
  void stop();

  int port() const { return port_; }
  std::string url() const;
  int segment_requests() const { return segment_requests_.load(); }
  int depth_requests() const { return depth_requests_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> segment_requests_{0};
  std::atomic<int> depth_requests_{0};
};

}  // namespace s2diff::percept
