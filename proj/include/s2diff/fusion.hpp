// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "s2diff/image.hpp"

namespace s2diff::fusion {

// Per-prompt segmentation confidences: n masks sharing H x W, values in [0,1].
// h/w are carried on the set so the empty set still has a defined shape.
struct SemanticMaskSet {
  int h = 0;
  int w = 0;
  std::vector<std::string> labels;
  std::vector<GridF> masks;
};

// Pixel-wise maximum over a mask set; all zeros for an empty set.
struct FusedMask {
  GridF values;
};

// Relative depth after per-frame min-max normalization to [0,1].
struct DepthMap {
  GridF values;
};

// Channel stack (mask, depth): shape (2, H, W), both channels in [0,1].
struct SpatialSemanticObs {
  int h = 0;
  int w = 0;
  std::vector<float> z;  // channel-major, z[c*h*w + y*w + x]

  float at(int c, int y, int x) const { return z[(static_cast<size_t>(c) * h + y) * w + x]; }
};

FusedMask fuse_masks(const SemanticMaskSet& maskset);
DepthMap normalize_depth(const GridF& raw);
SpatialSemanticObs build_observation(const FusedMask& fused, const DepthMap& depth);

}  // namespace s2diff::fusion
