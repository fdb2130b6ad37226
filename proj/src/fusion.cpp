// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace s2diff::fusion {

FusedMask fuse_masks(const SemanticMaskSet& maskset) {
  for (const GridF& m : maskset.masks) {
    if (m.h != maskset.h || m.w != maskset.w) {
      throw std::invalid_argument("fuse_masks: mask dimensions differ");
    }
  }
  FusedMask out;
  out.values = GridF(maskset.h, maskset.w, 0.f);
  for (const GridF& m : maskset.masks) {
    for (size_t i = 0; i < m.v.size(); ++i) {
      out.values.v[i] = std::max(out.values.v[i], m.v[i]);
    }
  }
  return out;
}

DepthMap normalize_depth(const GridF& raw) {
  if (raw.v.empty()) throw std::invalid_argument("normalize_depth: empty input");
  float lo = raw.v[0];
  float hi = raw.v[0];
  for (float x : raw.v) {
    if (!std::isfinite(x)) throw std::invalid_argument("normalize_depth: non-finite input");
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  DepthMap out;
  out.values = GridF(raw.h, raw.w);
  const float range = hi - lo;
  if (range < 1e-8f) {
    std::fill(out.values.v.begin(), out.values.v.end(), 0.5f);
  } else {
    for (size_t i = 0; i < raw.v.size(); ++i) out.values.v[i] = (raw.v[i] - lo) / range;
  }
  return out;
}

SpatialSemanticObs build_observation(const FusedMask& fused, const DepthMap& depth) {
  if (fused.values.h != depth.values.h || fused.values.w != depth.values.w) {
    throw std::invalid_argument("build_observation: dimension mismatch");
  }
  SpatialSemanticObs obs;
  obs.h = fused.values.h;
  obs.w = fused.values.w;
  obs.z.resize(2 * fused.values.size());
  std::copy(fused.values.v.begin(), fused.values.v.end(), obs.z.begin());
  std::copy(depth.values.v.begin(), depth.values.v.end(), obs.z.begin() + fused.values.size());
  return obs;
}

}  // namespace s2diff::fusion
