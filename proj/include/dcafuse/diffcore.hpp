// Copyright (c) 2026 The dcafuse Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable primitives with hand-written backward passes.
//
// Each primitive comes in two flavours: a batch form over B x width tensors
// (the public contract, used by tests and the gradient checker) and a
// vector form over spans that the fused operators call in their inner loops.
// Backward functions ACCUMULATE into parameter gradients and OVERWRITE input
// gradients unless stated otherwise.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dcafuse/random.hpp"
#include "dcafuse/tensor.hpp"

namespace dcafuse {

// ---------------------------------------------------------------------------
// Affine map y = W x + b

struct AffineParams {
  Tensor weight;  // out x in
  Tensor bias;    // out

  AffineParams() = default;
  AffineParams(std::size_t out, std::size_t in) : weight({out, in}), bias({out}) {}

  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }

  static AffineParams identity(std::size_t n) {
    AffineParams p(n, n);
    for (std::size_t i = 0; i < n; ++i) p.weight.at(i, i) = 1.0;
    return p;
  }

  /// Glorot-uniform weights, zero bias.
  static AffineParams glorot(std::size_t out, std::size_t in, Rng& rng) {
    AffineParams p(out, in);
    const Real a = std::sqrt(6.0 / static_cast<Real>(in + out));
    for (auto& w : p.weight.vec()) w = rng.uniform(-a, a);
    return p;
  }

  AffineParams zeros_like() const { return AffineParams(out(), in()); }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

inline void affine_apply(std::span<const Real> x, const AffineParams& p, std::span<Real> y) {
  const std::size_t out = p.out(), in = p.in();
  assert(x.size() == in && y.size() == out);
  const Real* w = p.weight.data().data();
  for (std::size_t o = 0; o < out; ++o) {
    Real acc = p.bias[o];
    const Real* wr = w + o * in;
    for (std::size_t i = 0; i < in; ++i) acc += wr[i] * x[i];
    y[o] = acc;
  }
}

/// grad_x (if non-empty) is accumulated, as is grad_p.
inline void affine_apply_backward(std::span<const Real> x, const AffineParams& p, std::span<const Real> grad_y,
                                  std::span<Real> grad_x, AffineParams* grad_p) {
  const std::size_t out = p.out(), in = p.in();
  const Real* w = p.weight.data().data();
  if (!grad_x.empty()) {
    for (std::size_t o = 0; o < out; ++o) {
      const Real g = grad_y[o];
      if (g == 0.0) continue;
      const Real* wr = w + o * in;
      for (std::size_t i = 0; i < in; ++i) grad_x[i] += wr[i] * g;
    }
  }
  if (grad_p) {
    Real* gw = grad_p->weight.data().data();
    for (std::size_t o = 0; o < out; ++o) {
      const Real g = grad_y[o];
      grad_p->bias[o] += g;
      if (g == 0.0) continue;
      Real* gr = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) gr[i] += g * x[i];
    }
  }
}

inline void check_affine_input(const Tensor& x, const AffineParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.in()) {
    throw DimensionError("affine: input " + detail::shape_str(x.shape()) + " incompatible with weight " +
                         detail::shape_str(p.weight.shape()));
  }
  if (p.bias.shape() != std::vector<std::size_t>{p.out()}) {
    throw DimensionError("affine: bias shape " + detail::shape_str(p.bias.shape()) + " does not match weight rows");
  }
}

inline Tensor affine_forward(const Tensor& x, const AffineParams& p) {
  check_affine_input(x, p);
  Tensor y({x.dim(0), p.out()});
  for (std::size_t b = 0; b < x.dim(0); ++b) affine_apply(x.row(b), p, y.row(b));
  return y;
}

struct AffineGrads {
  Tensor x;
  AffineParams params;
};

inline AffineGrads affine_backward(const Tensor& x, const AffineParams& p, const Tensor& grad_out) {
  check_affine_input(x, p);
  grad_out.require_shape({x.dim(0), p.out()}, "affine_backward grad_out");
  AffineGrads g{x.zeros_like(), p.zeros_like()};
  for (std::size_t b = 0; b < x.dim(0); ++b) affine_apply_backward(x.row(b), p, grad_out.row(b), g.x.row(b), &g.params);
  return g;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension.

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  Real eps = 1e-5;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t c, Real eps_ = 1e-5) : gamma({c}, 1.0), beta({c}, 0.0), eps(eps_) {}

  std::size_t width() const { return gamma.size(); }

  LayerNormParams zeros_like() const {
    LayerNormParams g(width(), eps);
    g.gamma.fill(0.0);
    return g;
  }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

/// Per-vector statistics needed by the backward pass.
struct LayerNormCache {
  std::vector<Real> xhat;
  Real inv_std = 0.0;
};

inline void layer_norm_apply(std::span<const Real> x, const LayerNormParams& p, std::span<Real> y,
                             LayerNormCache& cache) {
  const std::size_t c = x.size();
  Real mean = 0.0;
  for (Real v : x) mean += v;
  mean /= static_cast<Real>(c);
  Real var = 0.0;
  for (Real v : x) var += (v - mean) * (v - mean);
  var /= static_cast<Real>(c);
  cache.inv_std = 1.0 / std::sqrt(var + p.eps);
  cache.xhat.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    cache.xhat[i] = (x[i] - mean) * cache.inv_std;
    y[i] = p.gamma[i] * cache.xhat[i] + p.beta[i];
  }
}

/// grad_x is accumulated.
inline void layer_norm_apply_backward(const LayerNormCache& cache, const LayerNormParams& p,
                                      std::span<const Real> grad_y, std::span<Real> grad_x,
                                      LayerNormParams* grad_p) {
  const std::size_t c = cache.xhat.size();
  Real mean_g = 0.0, mean_gx = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const Real gi = grad_y[i] * p.gamma[i];
    mean_g += gi;
    mean_gx += gi * cache.xhat[i];
    if (grad_p) {
      grad_p->gamma[i] += grad_y[i] * cache.xhat[i];
      grad_p->beta[i] += grad_y[i];
    }
  }
  mean_g /= static_cast<Real>(c);
  mean_gx /= static_cast<Real>(c);
  for (std::size_t i = 0; i < c; ++i) {
    const Real gi = grad_y[i] * p.gamma[i];
    grad_x[i] += cache.inv_std * (gi - mean_g - cache.xhat[i] * mean_gx);
  }
}

inline Tensor layer_norm_forward(const Tensor& x, const LayerNormParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.width()) throw DimensionError("layer_norm: width mismatch");
  Tensor y = x.zeros_like();
  LayerNormCache cache;
  for (std::size_t b = 0; b < x.dim(0); ++b) layer_norm_apply(x.row(b), p, y.row(b), cache);
  return y;
}

struct LayerNormGrads {
  Tensor x;
  LayerNormParams params;
};

inline LayerNormGrads layer_norm_backward(const Tensor& x, const LayerNormParams& p, const Tensor& grad_out) {
  if (x.rank() != 2 || x.dim(1) != p.width()) throw DimensionError("layer_norm: width mismatch");
  grad_out.require_shape(x.shape(), "layer_norm_backward grad_out");
  LayerNormGrads g{x.zeros_like(), p.zeros_like()};
  LayerNormCache cache;
  std::vector<Real> scratch(p.width());
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    layer_norm_apply(x.row(b), p, scratch, cache);
    layer_norm_apply_backward(cache, p, grad_out.row(b), g.x.row(b), &g.params);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Softmax over the last dimension, max-subtracted.

inline void softmax_apply(std::span<const Real> logits, std::span<Real> y) {
  const Real mx = *std::max_element(logits.begin(), logits.end());
  Real z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    y[j] = std::exp(logits[j] - mx);
    z += y[j];
  }
  const Real inv = 1.0 / z;
  for (auto& v : y) v *= inv;
}

/// grad_logits is overwritten.
inline void softmax_apply_backward(std::span<const Real> y, std::span<const Real> grad_y,
                                   std::span<Real> grad_logits) {
  Real dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) dot += grad_y[j] * y[j];
  for (std::size_t j = 0; j < y.size(); ++j) grad_logits[j] = y[j] * (grad_y[j] - dot);
}

inline Tensor softmax_forward(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: expected B x J logits");
  Tensor y = logits.zeros_like();
  for (std::size_t b = 0; b < logits.dim(0); ++b) softmax_apply(logits.row(b), y.row(b));
  return y;
}

/// Takes the forward OUTPUT, not the logits.
inline Tensor softmax_backward(const Tensor& y, const Tensor& grad_out) {
  grad_out.require_shape(y.shape(), "softmax_backward grad_out");
  Tensor g = y.zeros_like();
  for (std::size_t b = 0; b < y.dim(0); ++b) softmax_apply_backward(y.row(b), grad_out.row(b), g.row(b));
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear sampling of an H x W x C map at normalized coordinates.
//
// Pixel-center convention: px = u * W - 0.5, py = v * H - 0.5, so the center
// of pixel (i, j) sits at uv = ((j + 0.5) / W, (i + 0.5) / H). Neighbor
// indices are clamped to the border; the fractional weights are not.

struct BilinearTap {
  std::size_t offset[4];  // element offsets of the four corners (channel 0)
  Real weight[4];
  // d(weight)/d(px) and d(weight)/d(py)
  Real dwx[4];
  Real dwy[4];
};

inline BilinearTap bilinear_tap(std::size_t height, std::size_t width, std::size_t channels, Real u, Real v) {
  const Real px = u * static_cast<Real>(width) - 0.5;
  const Real py = v * static_cast<Real>(height) - 0.5;
  const Real fx0 = std::floor(px), fy0 = std::floor(py);
  const Real fx = px - fx0, fy = py - fy0;
  auto clampi = [](Real i, std::size_t n) {
    if (i < 0.0) return std::size_t{0};
    if (i > static_cast<Real>(n - 1)) return n - 1;
    return static_cast<std::size_t>(i);
  };
  const std::size_t x0 = clampi(fx0, width), x1 = clampi(fx0 + 1.0, width);
  const std::size_t y0 = clampi(fy0, height), y1 = clampi(fy0 + 1.0, height);
  BilinearTap t{};
  t.offset[0] = (y0 * width + x0) * channels;
  t.offset[1] = (y0 * width + x1) * channels;
  t.offset[2] = (y1 * width + x0) * channels;
  t.offset[3] = (y1 * width + x1) * channels;
  t.weight[0] = (1.0 - fx) * (1.0 - fy);
  t.weight[1] = fx * (1.0 - fy);
  t.weight[2] = (1.0 - fx) * fy;
  t.weight[3] = fx * fy;
  t.dwx[0] = -(1.0 - fy);
  t.dwx[1] = (1.0 - fy);
  t.dwx[2] = -fy;
  t.dwx[3] = fy;
  t.dwy[0] = -(1.0 - fx);
  t.dwy[1] = -fx;
  t.dwy[2] = (1.0 - fx);
  t.dwy[3] = fx;
  return t;
}

inline void check_map(const Tensor& map) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be H x W x C, got " + detail::shape_str(map.shape()));
}

/// out is overwritten.
inline void bilinear_sample_into(const Tensor& map, Real u, Real v, std::span<Real> out) {
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  const BilinearTap t = bilinear_tap(h, w, c, u, v);
  const Real* m = map.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    out[ch] = t.weight[0] * m[t.offset[0] + ch] + t.weight[1] * m[t.offset[1] + ch] +
              t.weight[2] * m[t.offset[2] + ch] + t.weight[3] * m[t.offset[3] + ch];
  }
}

/// Accumulates into grad_map (when non-null) and into grad_uv[0..1].
inline void bilinear_sample_backward_into(const Tensor& map, Real u, Real v, std::span<const Real> grad_out,
                                          Tensor* grad_map, Real* grad_uv) {
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  const BilinearTap t = bilinear_tap(h, w, c, u, v);
  const Real* m = map.data().data();
  if (grad_uv) {
    Real gx = 0.0, gy = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const Real g = grad_out[ch];
      if (g == 0.0) continue;
      Real sx = 0.0, sy = 0.0;
      for (int k = 0; k < 4; ++k) {
        sx += t.dwx[k] * m[t.offset[k] + ch];
        sy += t.dwy[k] * m[t.offset[k] + ch];
      }
      gx += g * sx;
      gy += g * sy;
    }
    grad_uv[0] += gx * static_cast<Real>(w);
    grad_uv[1] += gy * static_cast<Real>(h);
  }
  if (grad_map) {
    Real* gm = grad_map->data().data();
    for (int k = 0; k < 4; ++k) {
      if (t.weight[k] == 0.0) continue;
      for (std::size_t ch = 0; ch < c; ++ch) gm[t.offset[k] + ch] += t.weight[k] * grad_out[ch];
    }
  }
}

inline std::vector<Real> bilinear_sample(const Tensor& map, Real u, Real v) {
  check_map(map);
  std::vector<Real> out(map.dim(2));
  bilinear_sample_into(map, u, v, out);
  return out;
}

struct BilinearGrads {
  Tensor map;
  Real uv[2] = {0.0, 0.0};
};

inline BilinearGrads bilinear_sample_backward(const Tensor& map, Real u, Real v, std::span<const Real> grad_out) {
  check_map(map);
  if (grad_out.size() != map.dim(2)) throw DimensionError("bilinear_sample_backward: grad_out width != channels");
  BilinearGrads g{map.zeros_like()};
  bilinear_sample_backward_into(map, u, v, grad_out, &g.map, g.uv);
  return g;
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron: affine layers with rectified-linear activations
// between them and none after the last. relu'(0) is taken as 0.

struct Mlp {
  std::vector<AffineParams> layers;

  std::size_t in() const { return layers.front().in(); }
  std::size_t out() const { return layers.back().out(); }

  Mlp zeros_like() const {
    Mlp g;
    for (const auto& l : layers) g.layers.push_back(l.zeros_like());
    return g;
  }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].for_each(prefix + "." + std::to_string(i), f);
  }

  /// widths = {in, hidden..., out}; Glorot init throughout.
  static Mlp glorot(const std::vector<std::size_t>& widths, Rng& rng) {
    Mlp m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) m.layers.push_back(AffineParams::glorot(widths[i + 1], widths[i], rng));
    return m;
  }

  void validate(const std::string& what) const {
    if (layers.empty()) throw DimensionError(what + ": MLP has no layers");
    for (std::size_t i = 1; i < layers.size(); ++i) {
      if (layers[i].in() != layers[i - 1].out()) {
        throw DimensionError(what + ": layer " + std::to_string(i) + " input width " + std::to_string(layers[i].in()) +
                             " != previous output width " + std::to_string(layers[i - 1].out()));
      }
    }
  }
};

/// Activations of one forward pass: acts[0] is the input, acts[i] the
/// (post-activation) output of layer i-1.
struct MlpCache {
  std::vector<std::vector<Real>> acts;
};

inline void mlp_apply(const Mlp& m, std::span<const Real> x, MlpCache& cache) {
  cache.acts.resize(m.layers.size() + 1);
  cache.acts[0].assign(x.begin(), x.end());
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& y = cache.acts[i + 1];
    y.resize(m.layers[i].out());
    affine_apply(cache.acts[i], m.layers[i], y);
    if (i + 1 < m.layers.size()) {
      for (auto& v : y) v = v > 0.0 ? v : 0.0;
    }
  }
}

inline std::span<const Real> mlp_output(const MlpCache& cache) { return cache.acts.back(); }

/// grad_x (if non-empty) is accumulated; grad_m (if non-null) is accumulated.
inline void mlp_apply_backward(const Mlp& m, const MlpCache& cache, std::span<const Real> grad_y,
                               std::span<Real> grad_x, Mlp* grad_m) {
  std::vector<Real> g(grad_y.begin(), grad_y.end());
  std::vector<Real> gin;
  for (std::size_t i = m.layers.size(); i-- > 0;) {
    if (i + 1 < m.layers.size()) {
      const auto& post = cache.acts[i + 1];
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (post[j] <= 0.0) g[j] = 0.0;
      }
    }
    const bool need_input_grad = i > 0 || !grad_x.empty();
    gin.assign(need_input_grad ? m.layers[i].in() : 0, 0.0);
    affine_apply_backward(cache.acts[i], m.layers[i], g, gin, grad_m ? &grad_m->layers[i] : nullptr);
    if (i == 0) {
      if (!grad_x.empty()) {
        for (std::size_t j = 0; j < gin.size(); ++j) grad_x[j] += gin[j];
      }
    } else {
      g.swap(gin);
    }
  }
}

// ---------------------------------------------------------------------------
// Transformer-style feed-forward block: affine -> relu -> affine, width
// preserving. The residual around it belongs to the caller.

struct FfnParams {
  Mlp mlp;

  static FfnParams glorot(std::size_t width, std::size_t hidden, Rng& rng) {
    return FfnParams{Mlp::glorot({width, hidden, width}, rng)};
  }
  std::size_t width() const { return mlp.in(); }
  std::size_t hidden() const { return mlp.layers.front().out(); }
  FfnParams zeros_like() const { return FfnParams{mlp.zeros_like()}; }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    mlp.for_each(prefix, f);
  }

  void validate() const {
    if (mlp.layers.size() != 2) throw DimensionError("ffn: expected exactly two affine layers");
    mlp.validate("ffn");
    if (mlp.out() != mlp.in()) throw DimensionError("ffn: output width must equal input width");
  }
};

inline Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.width()) throw DimensionError("ffn: input width mismatch");
  Tensor y = x.zeros_like();
  MlpCache cache;
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    mlp_apply(p.mlp, x.row(b), cache);
    std::copy_n(mlp_output(cache).begin(), p.width(), y.row(b).begin());
  }
  return y;
}

struct FfnGrads {
  Tensor x;
  FfnParams params;
};

inline FfnGrads ffn_backward(const Tensor& x, const FfnParams& p, const Tensor& grad_out) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.width()) throw DimensionError("ffn: input width mismatch");
  grad_out.require_shape(x.shape(), "ffn_backward grad_out");
  FfnGrads g{x.zeros_like(), p.zeros_like()};
  MlpCache cache;
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    mlp_apply(p.mlp, x.row(b), cache);
    mlp_apply_backward(p.mlp, cache, grad_out.row(b), g.x.row(b), &g.params.mlp);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
inline Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f, const Tensor& x, Real h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor probe = x;
  Tensor g = x.zeros_like();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + h;
    const Real fp = f(probe);
    probe[i] = orig - h;
    const Real fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline Real max_rel_error(std::span<const Real> a, std::span<const Real> b, Real floor = 1e-6) {
  if (a.size() != b.size()) throw DimensionError("max_rel_error: length mismatch");
  Real worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace dcafuse
