// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace s2diff {

// Retryable transport failure (timeout, connection reset, HTTP 5xx).
struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-retryable wire protocol violation (HTTP 4xx, malformed body).
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A callback broke its contract (e.g. denoiser returned the wrong shape).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingDivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EnvMisconfiguredError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace s2diff
