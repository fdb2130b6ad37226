// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "s2diff/rng.hpp"

namespace s2diff::nets {

struct Param {
  std::vector<int> shape;
  std::vector<double> w;
  std::vector<double> g;

  size_t size() const { return w.size(); }
};

// Owns every trainable tensor, keyed by a unique path-like name. Ordered so
// optimizer sweeps and checkpoints are deterministic.
class ParamStore {
 public:
  Param& create(const std::string& name, std::vector<int> shape);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  std::map<std::string, Param>& all() { return params_; }
  const std::map<std::string, Param>& all() const { return params_; }
  void zero_grads();
  size_t total_params() const;

 private:
  std::map<std::string, Param> params_;
};

class AdamW {
 public:
  explicit AdamW(double lr, double weight_decay = 1e-6, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int steps() const { return t_; }
  void step(ParamStore& store);

 private:
  double lr_, wd_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Exponential moving average of the store's weights.
class Ema {
 public:
  Ema() = default;
  explicit Ema(const ParamStore& store);
  void update(const ParamStore& store, double decay);
  const std::map<std::string, std::vector<double>>& tensors() const { return shadow_; }
  std::map<std::string, std::vector<double>>& tensors() { return shadow_; }
  void copy_into(ParamStore& store) const;

 private:
  std::map<std::string, std::vector<double>> shadow_;
};

// ---------------------------------------------------------------------------
// Layers. Each caches what backward needs; backward accumulates parameter
// gradients and returns the input gradient.

class Conv2D {
 public:
  Conv2D(ParamStore& store, const std::string& name, int in_c, int out_c, int k, int stride,
         int pad, Rng& rng);
  std::vector<double> forward(const std::vector<double>& x, int n, int h, int w);
  std::vector<double> backward(const std::vector<double>& dy);
  int out_h() const { return oh_; }
  int out_w() const { return ow_; }
  int out_c() const { return out_c_; }

 private:
  int in_c_, out_c_, k_, stride_, pad_;
  Param *w_, *b_;
  int n_ = 0, h_ = 0, wd_ = 0, oh_ = 0, ow_ = 0;
  std::vector<double> x_;
};

class Conv1D {
 public:
  Conv1D(ParamStore& store, const std::string& name, int in_c, int out_c, int k, int stride,
         int pad, Rng& rng);
  std::vector<double> forward(const std::vector<double>& x, int n, int t);
  std::vector<double> backward(const std::vector<double>& dy);
  int out_t() const { return ot_; }
  int out_c() const { return out_c_; }

 private:
  int in_c_, out_c_, k_, stride_, pad_;
  Param *w_, *b_;
  int n_ = 0, t_ = 0, ot_ = 0;
  std::vector<double> x_;
};

class ConvTranspose1D {
 public:
  ConvTranspose1D(ParamStore& store, const std::string& name, int in_c, int out_c, int k,
                  int stride, int pad, Rng& rng);
  std::vector<double> forward(const std::vector<double>& x, int n, int t);
  std::vector<double> backward(const std::vector<double>& dy);
  int out_t() const { return ot_; }
  int out_c() const { return out_c_; }

 private:
  int in_c_, out_c_, k_, stride_, pad_;
  Param *w_, *b_;
  int n_ = 0, t_ = 0, ot_ = 0;
  std::vector<double> x_;
};

class GroupNorm {
 public:
  GroupNorm(ParamStore& store, const std::string& name, int channels);
  // spatial = product of the non-channel trailing dims (h*w or t).
  std::vector<double> forward(const std::vector<double>& x, int n, int spatial);
  std::vector<double> backward(const std::vector<double>& dy);
  int groups() const { return groups_; }

 private:
  int c_, groups_;
  Param *gamma_, *beta_;
  int n_ = 0, sp_ = 0;
  std::vector<double> xhat_, inv_std_;
};

class SiLU {
 public:
  std::vector<double> forward(const std::vector<double>& x);
  std::vector<double> backward(const std::vector<double>& dy);

 private:
  std::vector<double> x_;
};

class Linear {
 public:
  Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
         bool zero_init = false);
  std::vector<double> forward(const std::vector<double>& x, int n);
  std::vector<double> backward(const std::vector<double>& dy);
  int out_dim() const { return out_; }

 private:
  int in_, out_;
  Param *w_, *b_;
  int n_ = 0;
  std::vector<double> x_;
};

// Per-channel affine modulation from a conditioning vector; the generating
// linear map is zero-initialized so modulation starts at identity.
class Film {
 public:
  Film(ParamStore& store, const std::string& name, int cond_dim, int channels, Rng& rng);
  std::vector<double> forward(const std::vector<double>& x, const std::vector<double>& cond,
                              int n, int t);
  // Fills dcond (accumulated) and returns dx.
  std::vector<double> backward(const std::vector<double>& dy, std::vector<double>& dcond);

 private:
  int c_;
  Linear lin_;
  int n_ = 0, t_ = 0;
  std::vector<double> x_, sb_;
};

// ---------------------------------------------------------------------------

enum class HeadKind { kGap, kSpatialSoftmax };
HeadKind head_kind_from_string(const std::string& name);
std::string to_string(HeadKind head);

struct EncoderConfig {
  int in_channels = 2;
  int feature_dim = 128;
  int image_size = 64;     // must be a multiple of 16
  int base_width = 32;
  HeadKind head = HeadKind::kGap;
};

// Residual conv encoder: stem plus four stride-2 stages at widths
// {b, 2b, 4b, 8b}, two fixed coordinate channels appended to the input, and
// a pooled head projecting to feature_dim.
class VisionEncoder {
 public:
  VisionEncoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg,
                Rng& rng);
  ~VisionEncoder();
  std::vector<double> forward(const std::vector<double>& x, int n);
  std::vector<double> backward(const std::vector<double>& dfeat);
  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Stage;
  EncoderConfig cfg_;
  std::unique_ptr<Conv2D> stem_;
  GroupNorm stem_gn_;
  SiLU stem_act_;
  std::vector<std::unique_ptr<Stage>> stages_;
  std::unique_ptr<Linear> head_;
  int n_ = 0, final_hw_ = 0, final_c_ = 0;
  std::vector<double> final_x_, softmax_p_, coords_cache_;
};

struct DenoiserConfig {
  int action_dim = 2;
  int horizon = 16;        // must be even
  int cond_dim = 0;
  int width1 = 64;
  int width2 = 128;
};

// 1-D temporal U-Net over action chunks, FiLM-conditioned at every block.
class Denoiser1D {
 public:
  Denoiser1D(ParamStore& store, const std::string& prefix, const DenoiserConfig& cfg, Rng& rng);
  ~Denoiser1D();
  // a: [n, action_dim, horizon]; cond: [n, cond_dim]. Returns [n, action_dim, horizon].
  std::vector<double> forward(const std::vector<double>& a, const std::vector<double>& cond,
                              int n);
  // Returns dcond; the gradient wrt the noisy input is discarded.
  std::vector<double> backward(const std::vector<double>& dy);
  const DenoiserConfig& config() const { return cfg_; }

 private:
  struct Block;
  DenoiserConfig cfg_;
  std::unique_ptr<Conv1D> in_conv_;
  std::unique_ptr<Block> res1_;
  std::unique_ptr<Conv1D> down_;
  std::unique_ptr<Block> res2_, mid_;
  std::unique_ptr<ConvTranspose1D> up_;
  std::unique_ptr<Block> res3_;
  GroupNorm out_gn_;
  SiLU out_act_;
  std::unique_ptr<Conv1D> out_conv_;
  int n_ = 0;
  std::vector<double> skip_;
};

inline constexpr int kTimestepEmbedDim = 64;

// Sinusoidal embedding of a diffusion step index.
std::vector<double> timestep_embedding(int k, int dim = kTimestepEmbedDim);

// Encoder + conditioning + denoiser, predicting the clean action chunk.
class PolicyNet {
 public:
  PolicyNet(ParamStore& store, const EncoderConfig& enc_cfg, DenoiserConfig den_cfg, int n_obs,
            int proprio_dim, uint64_t init_seed);

  // images: [n * n_obs, in_channels, S, S]; proprio: [n, n_obs * proprio_dim];
  // a: [n, action_dim, horizon]; ks: [n]. Returns [n, action_dim, horizon].
  std::vector<double> forward(const std::vector<double>& images,
                              const std::vector<double>& proprio, const std::vector<double>& a,
                              const std::vector<int>& ks, int n);
  void backward(const std::vector<double>& dy);

  int cond_dim() const { return den_cfg_.cond_dim; }
  const EncoderConfig& encoder_config() const { return enc_cfg_; }
  const DenoiserConfig& denoiser_config() const { return den_cfg_; }
  int n_obs() const { return n_obs_; }
  int proprio_dim() const { return proprio_dim_; }

 private:
  EncoderConfig enc_cfg_;
  DenoiserConfig den_cfg_;
  int n_obs_, proprio_dim_;
  std::unique_ptr<VisionEncoder> encoder_;
  std::unique_ptr<Linear> t_lin_;
  SiLU t_act_;
  std::unique_ptr<Denoiser1D> denoiser_;
  int n_ = 0;
};

// Mean squared error over all elements; fills dpred with its gradient.
double mse_loss(const std::vector<double>& pred, const std::vector<double>& target,
                std::vector<double>* dpred);

}  // namespace s2diff::nets
