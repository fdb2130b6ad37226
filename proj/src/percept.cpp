// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/percept.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"

#include "s2diff/errors.hpp"
#include "s2diff/sim.hpp"

namespace s2diff::percept {

using json = nlohmann::json;

PerceptionPrompt PerceptionPrompt::parse(const std::string& text) {
  PerceptionPrompt p{text};
  if (p.terms().empty()) {
    throw std::invalid_argument("prompt has no terms: \"" + text + "\"");
  }
  return p;
}

std::vector<std::string> PerceptionPrompt::terms() const {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    size_t a = cur.find_first_not_of(" \t\r\n");
    size_t b = cur.find_last_not_of(" \t\r\n");
    if (a != std::string::npos) {
      std::string t = cur.substr(a, b - a + 1);
      std::transform(t.begin(), t.end(), t.begin(),
                     [](unsigned char c) { return std::tolower(c); });
      out.push_back(t);
    }
    cur.clear();
  };
  for (char c : text) {
    if (c == '.') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

PerceptionResult OracleBackend::perceive(const ImageU8& rgb, const PerceptionPrompt& prompt) {
  (void)rgb;  // ground truth comes from the env state, not the frame
  if (env_ == nullptr) throw ContractViolation("oracle backend has no env");
  const auto t0 = std::chrono::steady_clock::now();
  PerceptionResult res = env_->ground_truth_perception(prompt);
  res.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

namespace {

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string frame_key(const ImageU8& rgb, const std::string& prompt) {
  uint64_t h = 0xcbf29ce484222325ull;
  const int dims[3] = {rgb.h, rgb.w, rgb.c};
  h = fnv1a(h, dims, sizeof(dims));
  h = fnv1a(h, rgb.data.data(), rgb.data.size());
  return std::to_string(h) + "|" + prompt;
}

json post_with_retry(const RemoteConfig& cfg, const std::string& path, const json& body) {
  httplib::Client cli(cfg.base_url);
  const auto secs = static_cast<time_t>(cfg.timeout_s);
  const auto usecs = static_cast<time_t>((cfg.timeout_s - secs) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);

  std::string last_error;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    if (attempt > 0) {
      const double delay = cfg.backoff_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) {
      last_error = "transport failure: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "server status " + std::to_string(res->status);
      continue;
    }
    if (res->status >= 400) {
      throw ProtocolError("perception service rejected " + path + " with status " +
                          std::to_string(res->status) + ": " + res->body);
    }
    json parsed = json::parse(res->body, nullptr, false);
    if (parsed.is_discarded()) {
      throw ProtocolError("perception service returned non-JSON body for " + path);
    }
    return parsed;
  }
  throw TransportError("perception request " + path + " failed after " +
                       std::to_string(cfg.max_attempts) + " attempts (" + last_error + ")");
}

GridF decode_gray(const std::string& b64, int expect_depth, const char* what) {
  DecodedPng png = png_decode(base64_decode(b64));
  if (png.channels != 1 || png.bit_depth != expect_depth) {
    throw ProtocolError(std::string(what) + " must be " + std::to_string(expect_depth) +
                        "-bit grayscale PNG");
  }
  GridF g{png.h, png.w, std::vector<float>(static_cast<size_t>(png.h) * png.w)};
  if (expect_depth == 8) {
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = png.px8[i] / 255.0f;
  } else {
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = png.px16[i] / 65535.0f;
  }
  return g;
}

}  // namespace

PerceptionResult RemoteBackend::perceive(const ImageU8& rgb, const PerceptionPrompt& prompt) {
  std::lock_guard<std::mutex> lock(cache_mu_);
  const std::string key = frame_key(rgb, prompt.text);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;

  const auto t0 = std::chrono::steady_clock::now();
  const std::string image_b64 = base64_encode(png_encode_rgb8(rgb));

  json seg = post_with_retry(cfg_, "/segment", {{"image", image_b64}, {"prompt", prompt.text}});
  if (!seg.contains("labels") || !seg.contains("masks") || !seg["labels"].is_array() ||
      !seg["masks"].is_array() || seg["labels"].size() != seg["masks"].size()) {
    throw ProtocolError("segment response missing parallel labels/masks arrays");
  }
  PerceptionResult res;
  res.masks.h = rgb.h;
  res.masks.w = rgb.w;
  for (size_t i = 0; i < seg["labels"].size(); ++i) {
    res.masks.labels.push_back(seg["labels"][i].get<std::string>());
    GridF m = decode_gray(seg["masks"][i].get<std::string>(), 8, "mask");
    if (m.h != rgb.h || m.w != rgb.w) throw ProtocolError("mask shape mismatch");
    res.masks.masks.push_back(std::move(m));
  }

  json dep = post_with_retry(cfg_, "/depth", {{"image", image_b64}});
  if (!dep.contains("depth")) throw ProtocolError("depth response missing depth field");
  res.raw_depth = decode_gray(dep["depth"].get<std::string>(), 16, "depth");
  if (res.raw_depth.h != rgb.h || res.raw_depth.w != rgb.w) {
    throw ProtocolError("depth shape mismatch");
  }

  res.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  cache_.emplace(key, res);
  return res;
}

size_t RemoteBackend::cache_size() const {
  std::lock_guard<std::mutex> lock(cache_mu_);
  return cache_.size();
}

PerceptionResult perceive(Backend& backend, const ImageU8& rgb, const PerceptionPrompt& prompt) {
  return backend.perceive(rgb, prompt);
}

// ---------------------------------------------------------------------------
// Mock server

struct MockPerceptionServer::Impl {
  httplib::Server svr;
  std::mutex mu;
  Fixture fixture;
  int fail_remaining = 0;
  int fail_status = 500;

  // Returns true when this request should be served a canned failure.
  bool take_failure(int& status) {
    std::lock_guard<std::mutex> lock(mu);
    if (fail_remaining <= 0) return false;
    --fail_remaining;
    status = fail_status;
    return true;
  }
};

MockPerceptionServer::MockPerceptionServer() : impl_(std::make_unique<Impl>()) {
  impl_->svr.Post("/segment", [this](const httplib::Request& req, httplib::Response& res) {
    segment_requests_.fetch_add(1);
    int status = 0;
    if (impl_->take_failure(status)) {
      res.status = status;
      res.set_content("injected failure", "text/plain");
      return;
    }
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("image") || !body.contains("prompt")) {
      res.status = 400;
      res.set_content("expected {image, prompt}", "text/plain");
      return;
    }
    try {
      png_decode(base64_decode(body["image"].get<std::string>()));
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(std::string("bad image: ") + e.what(), "text/plain");
      return;
    }
    std::lock_guard<std::mutex> lock(impl_->mu);
    json out;
    out["labels"] = impl_->fixture.masks.labels;
    out["masks"] = json::array();
    for (const GridF& m : impl_->fixture.masks.masks) {
      std::vector<uint8_t> px(m.v.size());
      for (size_t i = 0; i < m.v.size(); ++i) {
        px[i] = static_cast<uint8_t>(std::lround(std::clamp(m.v[i], 0.0f, 1.0f) * 255.0f));
      }
      out["masks"].push_back(base64_encode(png_encode_gray8(m.h, m.w, px)));
    }
    res.set_content(out.dump(), "application/json");
  });

  impl_->svr.Post("/depth", [this](const httplib::Request& req, httplib::Response& res) {
    depth_requests_.fetch_add(1);
    int status = 0;
    if (impl_->take_failure(status)) {
      res.status = status;
      res.set_content("injected failure", "text/plain");
      return;
    }
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("image")) {
      res.status = 400;
      res.set_content("expected {image}", "text/plain");
      return;
    }
    std::lock_guard<std::mutex> lock(impl_->mu);
    const GridF& d = impl_->fixture.depth;
    if (d.v.empty()) {
      res.status = 500;
      res.set_content("no fixture loaded", "text/plain");
      return;
    }
    std::vector<uint16_t> px(d.v.size());
    for (size_t i = 0; i < d.v.size(); ++i) {
      px[i] = static_cast<uint16_t>(std::lround(std::clamp(d.v[i], 0.0f, 1.0f) * 65535.0f));
    }
    json out;
    out["depth"] = base64_encode(png_encode_gray16(d.h, d.w, px));
    res.set_content(out.dump(), "application/json");
  });
}

MockPerceptionServer::~MockPerceptionServer() { stop(); }

void MockPerceptionServer::set_fixture(Fixture fixture) {
  std::lock_guard<std::mutex> lock(impl_->mu);
  impl_->fixture = std::move(fixture);
}

void MockPerceptionServer::fail_next(int n, int status) {
  std::lock_guard<std::mutex> lock(impl_->mu);
  impl_->fail_remaining = n;
  impl_->fail_status = status;
}

void MockPerceptionServer::start(int port) {
  if (thread_.joinable()) throw ContractViolation("mock server already started");
  if (port == 0) {
    port_ = impl_->svr.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw TransportError("mock server could not bind a port");
  } else {
    if (!impl_->svr.bind_to_port("127.0.0.1", port)) {
      throw TransportError("mock server could not bind port " + std::to_string(port));
    }
    port_ = port;
  }
  thread_ = std::thread([this] { impl_->svr.listen_after_bind(); });
  impl_->svr.wait_until_ready();
}

void MockPerceptionServer::stop() {
  if (!thread_.joinable()) return;
  impl_->svr.stop();
  thread_.join();
}

std::string MockPerceptionServer::url() const {
  return "http://127.0.0.1:" + std::to_string(port_);
}

}  // namespace s2diff::percept
