// Copyright (c) 2026 s2diff contributors
// SPDX-License-Identifier: Apache-2.0

#include "s2diff/nets.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "s2diff/errors.hpp"

namespace s2diff::nets {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

constexpr double kGnEps = 1e-5;

void he_init(std::vector<double>& w, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : w) v = rng.normal(0.0, std);
}

int norm_groups(int channels) {
  int groups = std::max(1, channels / 8);
  while (channels % groups != 0) --groups;
  return groups;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore / AdamW / Ema

Param& ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (params_.count(name)) throw ContractViolation("duplicate param: " + name);
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  Param& p = params_[name];
  p.shape = std::move(shape);
  p.w.assign(n, 0.0);
  p.g.assign(n, 0.0);
  return p;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractViolation("unknown param: " + name);
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractViolation("unknown param: " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, p] : params_) std::fill(p.g.begin(), p.g.end(), 0.0);
}

size_t ParamStore::total_params() const {
  size_t n = 0;
  for (const auto& [name, p] : params_) n += p.size();
  return n;
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParamStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, t_);
  const double bc2 = 1.0 - std::pow(b2_, t_);
  for (auto& [name, p] : store.all()) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * p.g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * p.g[i] * p.g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.w[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.w[i]);
    }
  }
}

Ema::Ema(const ParamStore& store) {
  for (const auto& [name, p] : store.all()) shadow_[name] = p.w;
}

void Ema::update(const ParamStore& store, double decay) {
  for (const auto& [name, p] : store.all()) {
    auto& s = shadow_.at(name);
    for (size_t i = 0; i < p.size(); ++i) s[i] = decay * s[i] + (1.0 - decay) * p.w[i];
  }
}

void Ema::copy_into(ParamStore& store) const {
  for (auto& [name, p] : store.all()) p.w = shadow_.at(name);
}

// ---------------------------------------------------------------------------
// Conv2D

Conv2D::Conv2D(ParamStore& store, const std::string& name, int in_c, int out_c, int k,
               int stride, int pad, Rng& rng)
    : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad) {
  w_ = &store.create(name + "/w", {out_c, in_c, k, k});
  b_ = &store.create(name + "/b", {out_c});
  he_init(w_->w, in_c * k * k, rng);
}

std::vector<double> Conv2D::forward(const std::vector<double>& x, int n, int h, int w) {
  n_ = n;
  h_ = h;
  wd_ = w;
  oh_ = (h + 2 * pad_ - k_) / stride_ + 1;
  ow_ = (w + 2 * pad_ - k_) / stride_ + 1;
  x_ = x;

  const int rows = in_c_ * k_ * k_;
  const int cols_n = oh_ * ow_;
  std::vector<double> cols(static_cast<size_t>(rows) * cols_n);
  std::vector<double> y(static_cast<size_t>(n) * out_c_ * cols_n);

  CMap wm(w_->w.data(), out_c_, rows);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.data() + static_cast<size_t>(s) * in_c_ * h * w;
    double* cp = cols.data();
    for (int ic = 0; ic < in_c_; ++ic) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              *cp++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                          ? xs[(static_cast<size_t>(ic) * h + iy) * w + ix]
                          : 0.0;
            }
          }
        }
      }
    }
    Map ym(y.data() + static_cast<size_t>(s) * out_c_ * cols_n, out_c_, cols_n);
    CMap cm(cols.data(), rows, cols_n);
    ym.noalias() = wm * cm;
    for (int oc = 0; oc < out_c_; ++oc) ym.row(oc).array() += b_->w[oc];
  }
  return y;
}

std::vector<double> Conv2D::backward(const std::vector<double>& dy) {
  const int rows = in_c_ * k_ * k_;
  const int cols_n = oh_ * ow_;
  std::vector<double> cols(static_cast<size_t>(rows) * cols_n);
  std::vector<double> dcols(static_cast<size_t>(rows) * cols_n);
  std::vector<double> dx(x_.size(), 0.0);

  Map dwm(w_->g.data(), out_c_, rows);
  CMap wm(w_->w.data(), out_c_, rows);
  for (int s = 0; s < n_; ++s) {
    const double* xs = x_.data() + static_cast<size_t>(s) * in_c_ * h_ * wd_;
    double* cp = cols.data();
    for (int ic = 0; ic < in_c_; ++ic) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              *cp++ = (iy >= 0 && iy < h_ && ix >= 0 && ix < wd_)
                          ? xs[(static_cast<size_t>(ic) * h_ + iy) * wd_ + ix]
                          : 0.0;
            }
          }
        }
      }
    }
    CMap dym(dy.data() + static_cast<size_t>(s) * out_c_ * cols_n, out_c_, cols_n);
    CMap cm(cols.data(), rows, cols_n);
    dwm.noalias() += dym * cm.transpose();
    for (int oc = 0; oc < out_c_; ++oc) b_->g[oc] += dym.row(oc).sum();

    Map dcm(dcols.data(), rows, cols_n);
    dcm.noalias() = wm.transpose() * dym;

    double* dxs = dx.data() + static_cast<size_t>(s) * in_c_ * h_ * wd_;
    const double* dcp = dcols.data();
    for (int ic = 0; ic < in_c_; ++ic) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              const double v = *dcp++;
              if (iy >= 0 && iy < h_ && ix >= 0 && ix < wd_) {
                dxs[(static_cast<size_t>(ic) * h_ + iy) * wd_ + ix] += v;
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Conv1D

Conv1D::Conv1D(ParamStore& store, const std::string& name, int in_c, int out_c, int k,
               int stride, int pad, Rng& rng)
    : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad) {
  w_ = &store.create(name + "/w", {out_c, in_c, k});
  b_ = &store.create(name + "/b", {out_c});
  he_init(w_->w, in_c * k, rng);
}

std::vector<double> Conv1D::forward(const std::vector<double>& x, int n, int t) {
  n_ = n;
  t_ = t;
  ot_ = (t + 2 * pad_ - k_) / stride_ + 1;
  x_ = x;
  std::vector<double> y(static_cast<size_t>(n) * out_c_ * ot_);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.data() + static_cast<size_t>(s) * in_c_ * t;
    double* ys = y.data() + static_cast<size_t>(s) * out_c_ * ot_;
    for (int oc = 0; oc < out_c_; ++oc) {
      for (int o = 0; o < ot_; ++o) {
        double acc = b_->w[oc];
        for (int ic = 0; ic < in_c_; ++ic) {
          for (int j = 0; j < k_; ++j) {
            const int i = o * stride_ + j - pad_;
            if (i >= 0 && i < t) {
              acc += w_->w[(static_cast<size_t>(oc) * in_c_ + ic) * k_ + j] *
                     xs[static_cast<size_t>(ic) * t + i];
            }
          }
        }
        ys[static_cast<size_t>(oc) * ot_ + o] = acc;
      }
    }
  }
  return y;
}

std::vector<double> Conv1D::backward(const std::vector<double>& dy) {
  std::vector<double> dx(x_.size(), 0.0);
  for (int s = 0; s < n_; ++s) {
    const double* xs = x_.data() + static_cast<size_t>(s) * in_c_ * t_;
    const double* dys = dy.data() + static_cast<size_t>(s) * out_c_ * ot_;
    double* dxs = dx.data() + static_cast<size_t>(s) * in_c_ * t_;
    for (int oc = 0; oc < out_c_; ++oc) {
      for (int o = 0; o < ot_; ++o) {
        const double d = dys[static_cast<size_t>(oc) * ot_ + o];
        b_->g[oc] += d;
        for (int ic = 0; ic < in_c_; ++ic) {
          for (int j = 0; j < k_; ++j) {
            const int i = o * stride_ + j - pad_;
            if (i >= 0 && i < t_) {
              w_->g[(static_cast<size_t>(oc) * in_c_ + ic) * k_ + j] +=
                  d * xs[static_cast<size_t>(ic) * t_ + i];
              dxs[static_cast<size_t>(ic) * t_ + i] +=
                  d * w_->w[(static_cast<size_t>(oc) * in_c_ + ic) * k_ + j];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ConvTranspose1D

ConvTranspose1D::ConvTranspose1D(ParamStore& store, const std::string& name, int in_c,
                                 int out_c, int k, int stride, int pad, Rng& rng)
    : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad) {
  w_ = &store.create(name + "/w", {in_c, out_c, k});
  b_ = &store.create(name + "/b", {out_c});
  he_init(w_->w, in_c * k, rng);
}

std::vector<double> ConvTranspose1D::forward(const std::vector<double>& x, int n, int t) {
  n_ = n;
  t_ = t;
  ot_ = (t - 1) * stride_ - 2 * pad_ + k_;
  x_ = x;
  std::vector<double> y(static_cast<size_t>(n) * out_c_ * ot_, 0.0);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.data() + static_cast<size_t>(s) * in_c_ * t;
    double* ys = y.data() + static_cast<size_t>(s) * out_c_ * ot_;
    for (int oc = 0; oc < out_c_; ++oc) {
      for (int o = 0; o < ot_; ++o) ys[static_cast<size_t>(oc) * ot_ + o] = b_->w[oc];
    }
    for (int ic = 0; ic < in_c_; ++ic) {
      for (int i = 0; i < t; ++i) {
        const double xv = xs[static_cast<size_t>(ic) * t + i];
        for (int oc = 0; oc < out_c_; ++oc) {
          for (int j = 0; j < k_; ++j) {
            const int o = i * stride_ + j - pad_;
            if (o >= 0 && o < ot_) {
              ys[static_cast<size_t>(oc) * ot_ + o] +=
                  w_->w[(static_cast<size_t>(ic) * out_c_ + oc) * k_ + j] * xv;
            }
          }
        }
      }
    }
  }
  return y;
}

std::vector<double> ConvTranspose1D::backward(const std::vector<double>& dy) {
  std::vector<double> dx(x_.size(), 0.0);
  for (int s = 0; s < n_; ++s) {
    const double* xs = x_.data() + static_cast<size_t>(s) * in_c_ * t_;
    const double* dys = dy.data() + static_cast<size_t>(s) * out_c_ * ot_;
    double* dxs = dx.data() + static_cast<size_t>(s) * in_c_ * t_;
    for (int oc = 0; oc < out_c_; ++oc) {
      for (int o = 0; o < ot_; ++o) b_->g[oc] += dys[static_cast<size_t>(oc) * ot_ + o];
    }
    for (int ic = 0; ic < in_c_; ++ic) {
      for (int i = 0; i < t_; ++i) {
        const double xv = xs[static_cast<size_t>(ic) * t_ + i];
        double acc = 0.0;
        for (int oc = 0; oc < out_c_; ++oc) {
          for (int j = 0; j < k_; ++j) {
            const int o = i * stride_ + j - pad_;
            if (o >= 0 && o < ot_) {
              const double d = dys[static_cast<size_t>(oc) * ot_ + o];
              w_->g[(static_cast<size_t>(ic) * out_c_ + oc) * k_ + j] += d * xv;
              acc += d * w_->w[(static_cast<size_t>(ic) * out_c_ + oc) * k_ + j];
            }
          }
        }
        dxs[static_cast<size_t>(ic) * t_ + i] = acc;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GroupNorm

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, int channels)
    : c_(channels), groups_(norm_groups(channels)) {
  gamma_ = &store.create(name + "/gamma", {channels});
  beta_ = &store.create(name + "/beta", {channels});
  std::fill(gamma_->w.begin(), gamma_->w.end(), 1.0);
}

std::vector<double> GroupNorm::forward(const std::vector<double>& x, int n, int spatial) {
  n_ = n;
  sp_ = spatial;
  const int cpg = c_ / groups_;
  const size_t m = static_cast<size_t>(cpg) * spatial;
  xhat_.resize(x.size());
  inv_std_.assign(static_cast<size_t>(n) * groups_, 0.0);
  std::vector<double> y(x.size());

  for (int s = 0; s < n; ++s) {
    for (int g = 0; g < groups_; ++g) {
      const size_t base = (static_cast<size_t>(s) * c_ + static_cast<size_t>(g) * cpg) * spatial;
      double mean = 0.0;
      for (size_t i = 0; i < m; ++i) mean += x[base + i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (size_t i = 0; i < m; ++i) {
        const double d = x[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + kGnEps);
      inv_std_[static_cast<size_t>(s) * groups_ + g] = inv;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const size_t cb = base + static_cast<size_t>(cc) * spatial;
        for (int i = 0; i < spatial; ++i) {
          const double xh = (x[cb + i] - mean) * inv;
          xhat_[cb + i] = xh;
          y[cb + i] = gamma_->w[ch] * xh + beta_->w[ch];
        }
      }
    }
  }
  return y;
}

std::vector<double> GroupNorm::backward(const std::vector<double>& dy) {
  const int cpg = c_ / groups_;
  const size_t m = static_cast<size_t>(cpg) * sp_;
  std::vector<double> dx(dy.size());

  for (int s = 0; s < n_; ++s) {
    for (int g = 0; g < groups_; ++g) {
      const size_t base = (static_cast<size_t>(s) * c_ + static_cast<size_t>(g) * cpg) * sp_;
      const double inv = inv_std_[static_cast<size_t>(s) * groups_ + g];
      double s1 = 0.0, s2 = 0.0;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const size_t cb = base + static_cast<size_t>(cc) * sp_;
        for (int i = 0; i < sp_; ++i) {
          const double dxh = dy[cb + i] * gamma_->w[ch];
          s1 += dxh;
          s2 += dxh * xhat_[cb + i];
          gamma_->g[ch] += dy[cb + i] * xhat_[cb + i];
          beta_->g[ch] += dy[cb + i];
        }
      }
      const double inv_m = 1.0 / static_cast<double>(m);
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const size_t cb = base + static_cast<size_t>(cc) * sp_;
        for (int i = 0; i < sp_; ++i) {
          const double dxh = dy[cb + i] * gamma_->w[ch];
          dx[cb + i] = inv * (dxh - s1 * inv_m - xhat_[cb + i] * s2 * inv_m);
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// SiLU / Linear / Film

std::vector<double> SiLU::forward(const std::vector<double>& x) {
  x_ = x;
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] / (1.0 + std::exp(-x[i]));
  }
  return y;
}

std::vector<double> SiLU::backward(const std::vector<double>& dy) {
  std::vector<double> dx(dy.size());
  for (size_t i = 0; i < dy.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x_[i]));
    dx[i] = dy[i] * s * (1.0 + x_[i] * (1.0 - s));
  }
  return dx;
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
               bool zero_init)
    : in_(in), out_(out) {
  w_ = &store.create(name + "/w", {out, in});
  b_ = &store.create(name + "/b", {out});
  if (!zero_init) he_init(w_->w, in, rng);
}

std::vector<double> Linear::forward(const std::vector<double>& x, int n) {
  n_ = n;
  x_ = x;
  std::vector<double> y(static_cast<size_t>(n) * out_);
  CMap xm(x.data(), n, in_);
  CMap wm(w_->w.data(), out_, in_);
  Map ym(y.data(), n, out_);
  ym.noalias() = xm * wm.transpose();
  for (int s = 0; s < n; ++s) {
    for (int o = 0; o < out_; ++o) y[static_cast<size_t>(s) * out_ + o] += b_->w[o];
  }
  return y;
}

std::vector<double> Linear::backward(const std::vector<double>& dy) {
  std::vector<double> dx(static_cast<size_t>(n_) * in_);
  CMap dym(dy.data(), n_, out_);
  CMap xm(x_.data(), n_, in_);
  CMap wm(w_->w.data(), out_, in_);
  Map dwm(w_->g.data(), out_, in_);
  Map dxm(dx.data(), n_, in_);
  dwm.noalias() += dym.transpose() * xm;
  for (int o = 0; o < out_; ++o) b_->g[o] += dym.col(o).sum();
  dxm.noalias() = dym * wm;
  return dx;
}

Film::Film(ParamStore& store, const std::string& name, int cond_dim, int channels, Rng& rng)
    : c_(channels), lin_(store, name + "/lin", cond_dim, 2 * channels, rng, true) {}

std::vector<double> Film::forward(const std::vector<double>& x, const std::vector<double>& cond,
                                  int n, int t) {
  n_ = n;
  t_ = t;
  x_ = x;
  sb_ = lin_.forward(cond, n);
  std::vector<double> y(x.size());
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c_; ++ch) {
      const double scale = 1.0 + sb_[static_cast<size_t>(s) * 2 * c_ + ch];
      const double shift = sb_[static_cast<size_t>(s) * 2 * c_ + c_ + ch];
      const size_t base = (static_cast<size_t>(s) * c_ + ch) * t;
      for (int i = 0; i < t; ++i) y[base + i] = x[base + i] * scale + shift;
    }
  }
  return y;
}

std::vector<double> Film::backward(const std::vector<double>& dy, std::vector<double>& dcond) {
  std::vector<double> dsb(static_cast<size_t>(n_) * 2 * c_, 0.0);
  std::vector<double> dx(dy.size());
  for (int s = 0; s < n_; ++s) {
    for (int ch = 0; ch < c_; ++ch) {
      const double scale = 1.0 + sb_[static_cast<size_t>(s) * 2 * c_ + ch];
      const size_t base = (static_cast<size_t>(s) * c_ + ch) * t_;
      double ds = 0.0, db = 0.0;
      for (int i = 0; i < t_; ++i) {
        ds += dy[base + i] * x_[base + i];
        db += dy[base + i];
        dx[base + i] = dy[base + i] * scale;
      }
      dsb[static_cast<size_t>(s) * 2 * c_ + ch] = ds;
      dsb[static_cast<size_t>(s) * 2 * c_ + c_ + ch] = db;
    }
  }
  const std::vector<double> dc = lin_.backward(dsb);
  if (dcond.empty()) dcond.assign(dc.size(), 0.0);
  for (size_t i = 0; i < dc.size(); ++i) dcond[i] += dc[i];
  return dx;
}

// ---------------------------------------------------------------------------
// VisionEncoder

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "gap") return HeadKind::kGap;
  if (name == "spatial-softmax") return HeadKind::kSpatialSoftmax;
  throw std::invalid_argument("unknown encoder head: " + name);
}

std::string to_string(HeadKind head) {
  return head == HeadKind::kGap ? "gap" : "spatial-softmax";
}

struct VisionEncoder::Stage {
  Conv2D down;
  GroupNorm gn0;
  SiLU a0;
  Conv2D c1;
  GroupNorm gn1;
  SiLU a1;
  Conv2D c2;
  GroupNorm gn2;
  SiLU a2;
  int in_h = 0, in_w = 0;
  std::vector<double> skip;

  Stage(ParamStore& store, const std::string& p, int in_c, int out_c, Rng& rng)
      : down(store, p + "/down", in_c, out_c, 3, 2, 1, rng),
        gn0(store, p + "/gn0", out_c),
        c1(store, p + "/c1", out_c, out_c, 3, 1, 1, rng),
        gn1(store, p + "/gn1", out_c),
        c2(store, p + "/c2", out_c, out_c, 3, 1, 1, rng),
        gn2(store, p + "/gn2", out_c) {}

  std::vector<double> forward(const std::vector<double>& x, int n, int h, int w) {
    in_h = h;
    in_w = w;
    auto d = down.forward(x, n, h, w);
    const int oh = down.out_h(), ow = down.out_w();
    d = gn0.forward(d, n, oh * ow);
    d = a0.forward(d);
    skip = d;
    auto r = c1.forward(d, n, oh, ow);
    r = gn1.forward(r, n, oh * ow);
    r = a1.forward(r);
    r = c2.forward(r, n, oh, ow);
    r = gn2.forward(r, n, oh * ow);
    for (size_t i = 0; i < r.size(); ++i) r[i] += d[i];
    return a2.forward(r);
  }

  std::vector<double> backward(const std::vector<double>& dy) {
    auto ds = a2.backward(dy);
    auto dr = gn2.backward(ds);
    dr = c2.backward(dr);
    dr = a1.backward(dr);
    dr = gn1.backward(dr);
    dr = c1.backward(dr);
    for (size_t i = 0; i < dr.size(); ++i) dr[i] += ds[i];
    dr = a0.backward(dr);
    dr = gn0.backward(dr);
    return down.backward(dr);
  }
};

VisionEncoder::~VisionEncoder() = default;

VisionEncoder::VisionEncoder(ParamStore& store, const std::string& prefix,
                             const EncoderConfig& cfg, Rng& rng)
    : cfg_(cfg), stem_gn_(store, prefix + "/stem_gn", cfg.base_width) {
  if (cfg.image_size < 16 || cfg.image_size % 16 != 0) {
    throw std::invalid_argument("encoder image_size must be a positive multiple of 16");
  }
  if (cfg.in_channels < 1 || cfg.base_width < 1 || cfg.feature_dim < 1) {
    throw std::invalid_argument("bad encoder config");
  }
  stem_ = std::make_unique<Conv2D>(store, prefix + "/stem", cfg.in_channels + 2,
                                   cfg.base_width, 3, 1, 1, rng);
  int c = cfg.base_width;
  for (int i = 0; i < 4; ++i) {
    const int out_c = cfg.base_width << (i);
    stages_.push_back(std::make_unique<Stage>(store, prefix + "/s" + std::to_string(i),
                                              c, out_c, rng));
    c = out_c;
  }
  final_c_ = c;
  const int head_in =
      cfg.head == HeadKind::kGap ? final_c_ : 3 * final_c_;
  head_ = std::make_unique<Linear>(store, prefix + "/head", head_in, cfg.feature_dim, rng);
}

std::vector<double> VisionEncoder::forward(const std::vector<double>& x, int n) {
  const int S = cfg_.image_size;
  const int ci = cfg_.in_channels;
  if (x.size() != static_cast<size_t>(n) * ci * S * S) {
    throw ContractViolation("encoder input shape mismatch");
  }
  n_ = n;

  // Append fixed coordinate channels in [-1, 1].
  std::vector<double> xc(static_cast<size_t>(n) * (ci + 2) * S * S);
  for (int s = 0; s < n; ++s) {
    const size_t src = static_cast<size_t>(s) * ci * S * S;
    const size_t dst = static_cast<size_t>(s) * (ci + 2) * S * S;
    std::copy(x.begin() + src, x.begin() + src + static_cast<size_t>(ci) * S * S,
              xc.begin() + dst);
    for (int y = 0; y < S; ++y) {
      for (int xx = 0; xx < S; ++xx) {
        const double cx = S > 1 ? 2.0 * xx / (S - 1) - 1.0 : 0.0;
        const double cy = S > 1 ? 2.0 * y / (S - 1) - 1.0 : 0.0;
        xc[dst + (static_cast<size_t>(ci) * S + y) * S + xx] = cx;
        xc[dst + (static_cast<size_t>(ci + 1) * S + y) * S + xx] = cy;
      }
    }
  }

  auto h = stem_->forward(xc, n, S, S);
  h = stem_gn_.forward(h, n, S * S);
  h = stem_act_.forward(h);
  int cur = S;
  for (auto& st : stages_) {
    h = st->forward(h, n, cur, cur);
    cur /= 2;
  }
  final_hw_ = cur;

  const int hw = cur * cur;
  std::vector<double> head_in;
  if (cfg_.head == HeadKind::kGap) {
    head_in.assign(static_cast<size_t>(n) * final_c_, 0.0);
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < final_c_; ++ch) {
        const size_t base = (static_cast<size_t>(s) * final_c_ + ch) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += h[base + i];
        head_in[static_cast<size_t>(s) * final_c_ + ch] = acc / hw;
      }
    }
  } else {
    // Per-channel softmax over space -> expected coords, alongside the mean.
    final_x_ = h;
    softmax_p_.resize(h.size());
    coords_cache_.assign(static_cast<size_t>(n) * final_c_ * 2, 0.0);
    head_in.assign(static_cast<size_t>(n) * 3 * final_c_, 0.0);
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < final_c_; ++ch) {
        const size_t base = (static_cast<size_t>(s) * final_c_ + ch) * hw;
        double mx = h[base];
        for (int i = 1; i < hw; ++i) mx = std::max(mx, h[base + i]);
        double z = 0.0;
        for (int i = 0; i < hw; ++i) {
          softmax_p_[base + i] = std::exp(h[base + i] - mx);
          z += softmax_p_[base + i];
        }
        double ex = 0.0, ey = 0.0, mean = 0.0;
        for (int i = 0; i < hw; ++i) {
          softmax_p_[base + i] /= z;
          const int py = i / cur, px = i % cur;
          const double cx = cur > 1 ? 2.0 * px / (cur - 1) - 1.0 : 0.0;
          const double cy = cur > 1 ? 2.0 * py / (cur - 1) - 1.0 : 0.0;
          ex += softmax_p_[base + i] * cx;
          ey += softmax_p_[base + i] * cy;
          mean += h[base + i];
        }
        coords_cache_[(static_cast<size_t>(s) * final_c_ + ch) * 2] = ex;
        coords_cache_[(static_cast<size_t>(s) * final_c_ + ch) * 2 + 1] = ey;
        head_in[static_cast<size_t>(s) * 3 * final_c_ + ch * 2] = ex;
        head_in[static_cast<size_t>(s) * 3 * final_c_ + ch * 2 + 1] = ey;
        head_in[static_cast<size_t>(s) * 3 * final_c_ + 2 * final_c_ + ch] = mean / hw;
      }
    }
  }
  return head_->forward(head_in, n);
}

std::vector<double> VisionEncoder::backward(const std::vector<double>& dfeat) {
  const int hw = final_hw_ * final_hw_;
  const auto dhead_in = head_->backward(dfeat);
  std::vector<double> dh(static_cast<size_t>(n_) * final_c_ * hw, 0.0);

  if (cfg_.head == HeadKind::kGap) {
    for (int s = 0; s < n_; ++s) {
      for (int ch = 0; ch < final_c_; ++ch) {
        const double d = dhead_in[static_cast<size_t>(s) * final_c_ + ch] / hw;
        const size_t base = (static_cast<size_t>(s) * final_c_ + ch) * hw;
        for (int i = 0; i < hw; ++i) dh[base + i] = d;
      }
    }
  } else {
    const int cur = final_hw_;
    for (int s = 0; s < n_; ++s) {
      for (int ch = 0; ch < final_c_; ++ch) {
        const size_t base = (static_cast<size_t>(s) * final_c_ + ch) * hw;
        const double dex = dhead_in[static_cast<size_t>(s) * 3 * final_c_ + ch * 2];
        const double dey = dhead_in[static_cast<size_t>(s) * 3 * final_c_ + ch * 2 + 1];
        const double dmean =
            dhead_in[static_cast<size_t>(s) * 3 * final_c_ + 2 * final_c_ + ch] / hw;
        const double ex = coords_cache_[(static_cast<size_t>(s) * final_c_ + ch) * 2];
        const double ey = coords_cache_[(static_cast<size_t>(s) * final_c_ + ch) * 2 + 1];
        for (int i = 0; i < hw; ++i) {
          const int py = i / cur, px = i % cur;
          const double cx = cur > 1 ? 2.0 * px / (cur - 1) - 1.0 : 0.0;
          const double cy = cur > 1 ? 2.0 * py / (cur - 1) - 1.0 : 0.0;
          dh[base + i] =
              softmax_p_[base + i] * ((cx - ex) * dex + (cy - ey) * dey) + dmean;
        }
      }
    }
  }

  for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
    dh = (*it)->backward(dh);
  }
  dh = stem_act_.backward(dh);
  dh = stem_gn_.backward(dh);
  dh = stem_->backward(dh);

  // Strip the coordinate channels.
  const int S = cfg_.image_size;
  const int ci = cfg_.in_channels;
  std::vector<double> dx(static_cast<size_t>(n_) * ci * S * S);
  for (int s = 0; s < n_; ++s) {
    const size_t src = static_cast<size_t>(s) * (ci + 2) * S * S;
    const size_t dst = static_cast<size_t>(s) * ci * S * S;
    std::copy(dh.begin() + src, dh.begin() + src + static_cast<size_t>(ci) * S * S,
              dx.begin() + dst);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Denoiser1D

struct Denoiser1D::Block {
  Conv1D c1;
  GroupNorm gn1;
  SiLU a1;
  Film film;
  Conv1D c2;
  GroupNorm gn2;
  std::unique_ptr<Conv1D> skip;
  SiLU a_out;
  int t = 0;
  std::vector<double> x_in;

  Block(ParamStore& store, const std::string& p, int in_c, int out_c, int cond_dim, Rng& rng)
      : c1(store, p + "/c1", in_c, out_c, 3, 1, 1, rng),
        gn1(store, p + "/gn1", out_c),
        film(store, p + "/film", cond_dim, out_c, rng),
        c2(store, p + "/c2", out_c, out_c, 3, 1, 1, rng),
        gn2(store, p + "/gn2", out_c) {
    if (in_c != out_c) skip = std::make_unique<Conv1D>(store, p + "/skip", in_c, out_c, 1, 1, 0, rng);
  }

  std::vector<double> forward(const std::vector<double>& x, const std::vector<double>& cond,
                              int n, int t_in) {
    t = t_in;
    auto h = c1.forward(x, n, t);
    h = gn1.forward(h, n, t);
    h = a1.forward(h);
    h = film.forward(h, cond, n, t);
    h = c2.forward(h, n, t);
    h = gn2.forward(h, n, t);
    std::vector<double> s;
    if (skip) {
      s = skip->forward(x, n, t);
    } else {
      s = x;
    }
    for (size_t i = 0; i < h.size(); ++i) h[i] += s[i];
    return a_out.forward(h);
  }

  std::vector<double> backward(const std::vector<double>& dy, std::vector<double>& dcond) {
    auto dsum = a_out.backward(dy);
    auto dh = gn2.backward(dsum);
    dh = c2.backward(dh);
    dh = film.backward(dh, dcond);
    dh = a1.backward(dh);
    dh = gn1.backward(dh);
    dh = c1.backward(dh);
    if (skip) {
      const auto dskip = skip->backward(dsum);
      for (size_t i = 0; i < dh.size(); ++i) dh[i] += dskip[i];
    } else {
      for (size_t i = 0; i < dh.size(); ++i) dh[i] += dsum[i];
    }
    return dh;
  }
};

Denoiser1D::~Denoiser1D() = default;

Denoiser1D::Denoiser1D(ParamStore& store, const std::string& prefix, const DenoiserConfig& cfg,
                       Rng& rng)
    : cfg_(cfg), out_gn_(store, prefix + "/out_gn", cfg.width1) {
  if (cfg.horizon < 2 || cfg.horizon % 2 != 0) {
    throw std::invalid_argument("denoiser horizon must be even and at least 2");
  }
  if (cfg.action_dim < 1 || cfg.cond_dim < 1 || cfg.width1 < 1 || cfg.width2 < 1) {
    throw std::invalid_argument("bad denoiser config");
  }
  in_conv_ = std::make_unique<Conv1D>(store, prefix + "/in", cfg.action_dim, cfg.width1, 3, 1, 1, rng);
  res1_ = std::make_unique<Block>(store, prefix + "/res1", cfg.width1, cfg.width1, cfg.cond_dim, rng);
  down_ = std::make_unique<Conv1D>(store, prefix + "/down", cfg.width1, cfg.width2, 3, 2, 1, rng);
  res2_ = std::make_unique<Block>(store, prefix + "/res2", cfg.width2, cfg.width2, cfg.cond_dim, rng);
  mid_ = std::make_unique<Block>(store, prefix + "/mid", cfg.width2, cfg.width2, cfg.cond_dim, rng);
  up_ = std::make_unique<ConvTranspose1D>(store, prefix + "/up", cfg.width2, cfg.width1, 4, 2, 1, rng);
  res3_ = std::make_unique<Block>(store, prefix + "/res3", 2 * cfg.width1, cfg.width1, cfg.cond_dim, rng);
  out_conv_ = std::make_unique<Conv1D>(store, prefix + "/out", cfg.width1, cfg.action_dim, 3, 1, 1, rng);
}

std::vector<double> Denoiser1D::forward(const std::vector<double>& a,
                                        const std::vector<double>& cond, int n) {
  const int T = cfg_.horizon;
  if (a.size() != static_cast<size_t>(n) * cfg_.action_dim * T) {
    throw ContractViolation("denoiser input shape mismatch");
  }
  n_ = n;
  auto h0 = in_conv_->forward(a, n, T);
  auto h1 = res1_->forward(h0, cond, n, T);
  auto d1 = down_->forward(h1, n, T);
  const int Th = down_->out_t();
  auto h2 = res2_->forward(d1, cond, n, Th);
  auto m = mid_->forward(h2, cond, n, Th);
  auto u = up_->forward(m, n, Th);

  skip_ = h1;
  std::vector<double> cat(static_cast<size_t>(n) * 2 * cfg_.width1 * T);
  for (int s = 0; s < n; ++s) {
    const size_t du = static_cast<size_t>(s) * cfg_.width1 * T;
    const size_t dc = static_cast<size_t>(s) * 2 * cfg_.width1 * T;
    std::copy(u.begin() + du, u.begin() + du + static_cast<size_t>(cfg_.width1) * T,
              cat.begin() + dc);
    std::copy(h1.begin() + du, h1.begin() + du + static_cast<size_t>(cfg_.width1) * T,
              cat.begin() + dc + static_cast<size_t>(cfg_.width1) * T);
  }

  auto h3 = res3_->forward(cat, cond, n, T);
  auto o = out_gn_.forward(h3, n, T);
  o = out_act_.forward(o);
  return out_conv_->forward(o, n, T);
}

std::vector<double> Denoiser1D::backward(const std::vector<double>& dy) {
  const int T = cfg_.horizon;
  std::vector<double> dcond;

  auto d = out_conv_->backward(dy);
  d = out_act_.backward(d);
  d = out_gn_.backward(d);
  auto dcat = res3_->backward(d, dcond);

  std::vector<double> du(static_cast<size_t>(n_) * cfg_.width1 * T);
  std::vector<double> dh1(static_cast<size_t>(n_) * cfg_.width1 * T);
  for (int s = 0; s < n_; ++s) {
    const size_t dus = static_cast<size_t>(s) * cfg_.width1 * T;
    const size_t dcs = static_cast<size_t>(s) * 2 * cfg_.width1 * T;
    std::copy(dcat.begin() + dcs, dcat.begin() + dcs + static_cast<size_t>(cfg_.width1) * T,
              du.begin() + dus);
    std::copy(dcat.begin() + dcs + static_cast<size_t>(cfg_.width1) * T,
              dcat.begin() + dcs + static_cast<size_t>(2 * cfg_.width1) * T,
              dh1.begin() + dus);
  }

  auto dm = up_->backward(du);
  dm = mid_->backward(dm, dcond);
  dm = res2_->backward(dm, dcond);
  auto dh1b = down_->backward(dm);
  for (size_t i = 0; i < dh1.size(); ++i) dh1[i] += dh1b[i];
  auto dh0 = res1_->backward(dh1, dcond);
  in_conv_->backward(dh0);
  return dcond;
}

// ---------------------------------------------------------------------------
// PolicyNet

std::vector<double> timestep_embedding(int k, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("embedding dim must be even");
  const int half = dim / 2;
  std::vector<double> e(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(k * freq);
    e[half + i] = std::cos(k * freq);
  }
  return e;
}

PolicyNet::PolicyNet(ParamStore& store, const EncoderConfig& enc_cfg, DenoiserConfig den_cfg,
                     int n_obs, int proprio_dim, uint64_t init_seed)
    : enc_cfg_(enc_cfg), n_obs_(n_obs), proprio_dim_(proprio_dim) {
  if (n_obs < 1 || proprio_dim < 1) throw std::invalid_argument("bad policy net config");
  Rng rng(mix_seed(init_seed, 0x1e17ull));
  encoder_ = std::make_unique<VisionEncoder>(store, "enc", enc_cfg, rng);
  t_lin_ = std::make_unique<Linear>(store, "cond/t", kTimestepEmbedDim, kTimestepEmbedDim, rng);
  den_cfg.cond_dim =
      kTimestepEmbedDim + n_obs * enc_cfg.feature_dim + n_obs * proprio_dim;
  den_cfg_ = den_cfg;
  denoiser_ = std::make_unique<Denoiser1D>(store, "den", den_cfg_, rng);
}

std::vector<double> PolicyNet::forward(const std::vector<double>& images,
                                       const std::vector<double>& proprio,
                                       const std::vector<double>& a, const std::vector<int>& ks,
                                       int n) {
  if (static_cast<int>(ks.size()) != n) throw ContractViolation("ks size mismatch");
  n_ = n;
  const int F = enc_cfg_.feature_dim;

  std::vector<double> temb(static_cast<size_t>(n) * kTimestepEmbedDim);
  for (int s = 0; s < n; ++s) {
    const auto e = timestep_embedding(ks[s]);
    std::copy(e.begin(), e.end(), temb.begin() + static_cast<size_t>(s) * kTimestepEmbedDim);
  }
  auto th = t_lin_->forward(temb, n);
  th = t_act_.forward(th);

  const auto feat = encoder_->forward(images, n * n_obs_);

  const int cd = den_cfg_.cond_dim;
  std::vector<double> cond(static_cast<size_t>(n) * cd);
  for (int s = 0; s < n; ++s) {
    double* c = cond.data() + static_cast<size_t>(s) * cd;
    std::copy(th.begin() + static_cast<size_t>(s) * kTimestepEmbedDim,
              th.begin() + static_cast<size_t>(s + 1) * kTimestepEmbedDim, c);
    std::copy(feat.begin() + static_cast<size_t>(s) * n_obs_ * F,
              feat.begin() + static_cast<size_t>(s + 1) * n_obs_ * F, c + kTimestepEmbedDim);
    std::copy(proprio.begin() + static_cast<size_t>(s) * n_obs_ * proprio_dim_,
              proprio.begin() + static_cast<size_t>(s + 1) * n_obs_ * proprio_dim_,
              c + kTimestepEmbedDim + n_obs_ * F);
  }
  return denoiser_->forward(a, cond, n);
}

void PolicyNet::backward(const std::vector<double>& dy) {
  const auto dcond = denoiser_->backward(dy);
  const int F = enc_cfg_.feature_dim;
  const int cd = den_cfg_.cond_dim;

  std::vector<double> dth(static_cast<size_t>(n_) * kTimestepEmbedDim);
  std::vector<double> dfeat(static_cast<size_t>(n_) * n_obs_ * F);
  for (int s = 0; s < n_; ++s) {
    const double* c = dcond.data() + static_cast<size_t>(s) * cd;
    std::copy(c, c + kTimestepEmbedDim, dth.begin() + static_cast<size_t>(s) * kTimestepEmbedDim);
    std::copy(c + kTimestepEmbedDim, c + kTimestepEmbedDim + static_cast<size_t>(n_obs_) * F,
              dfeat.begin() + static_cast<size_t>(s) * n_obs_ * F);
  }
  t_lin_->backward(t_act_.backward(dth));
  encoder_->backward(dfeat);
}

double mse_loss(const std::vector<double>& pred, const std::vector<double>& target,
                std::vector<double>* dpred) {
  if (pred.size() != target.size() || pred.empty()) {
    throw ContractViolation("mse_loss shape mismatch");
  }
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  double loss = 0.0;
  if (dpred) dpred->resize(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    loss += d * d * inv_n;
    if (dpred) (*dpred)[i] = 2.0 * d * inv_n;
  }
  return loss;
}

}  // namespace s2diff::nets
