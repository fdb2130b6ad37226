// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace s2diff {

// Interleaved 8-bit image, row-major, c = 1 or 3.
struct ImageU8 {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(int h_, int w_, int c_, std::uint8_t fill = 0)
      : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, fill) {}

  std::uint8_t& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
  std::uint8_t at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }

  void set_px(int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    at(y, x, 0) = r;
    at(y, x, 1) = g;
    at(y, x, 2) = b;
  }
};

// Single-channel float grid, row-major.
struct GridF {
  int h = 0;
  int w = 0;
  std::vector<float> v;

  GridF() = default;
  GridF(int h_, int w_, float fill = 0.f) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}
  GridF(int h_, int w_, std::vector<float> v_) : h(h_), w(w_), v(std::move(v_)) {}

  float& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  float at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  size_t size() const { return v.size(); }
};

struct DecodedPng {
  int h = 0;
  int w = 0;
  int channels = 0;
  int bit_depth = 0;                  // 8 or 16
  std::vector<std::uint8_t> px8;      // filled when bit_depth == 8, interleaved
  std::vector<std::uint16_t> px16;    // filled when bit_depth == 16, interleaved
};

// In-memory PNG codec. Throws ProtocolError on malformed input.
std::string png_encode_rgb8(const ImageU8& img);
std::string png_encode_gray8(int h, int w, const std::vector<std::uint8_t>& px);
std::string png_encode_gray16(int h, int w, const std::vector<std::uint16_t>& px);
DecodedPng png_decode(const std::string& bytes);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

// 5x7 bitmap text for chart annotation. Uppercase letters, digits and basic
// punctuation; anything else renders as a blank cell.
void draw_text(ImageU8& img, int y, int x, const std::string& text, std::uint8_t r, std::uint8_t g,
               std::uint8_t b, int scale = 1);
void fill_rect(ImageU8& img, int y0, int x0, int y1, int x1, std::uint8_t r, std::uint8_t g,
               std::uint8_t b);

}  // namespace s2diff
