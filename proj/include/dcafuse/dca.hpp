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

// Dynamic cross attention: one-to-many LiDAR-to-image feature fusion.
//
// For every point n and every camera k in which it projects validly:
//   query   = LN(MLP(f_n)) ++ mean_l LN(U_l s_l)        s_l = bilinear(I_l, p_ref)
//   offsets = offset_head(query)                        (L*M*D) x 2, normalized units
//   w       = softmax(weight_head(query))               over all L*M*D jointly
//   value_k = sum_{l,m,d} w_lmd * U_l bilinear(I_l, p_ref + offset_lmd)
// then I_n = mean over valid k (zero if none) and fused_n = FFN(f_n + I_n).
//
// U_l is the per-level 1x1 channel unifier. Because it is affine and every
// bilinear blend is a convex combination, unifying after sampling equals
// sampling a unified map; the operator samples the raw C_l-channel levels.
// Flat sample index: j = (l * M + m) * D + d.

#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcafuse/diffcore.hpp"
#include "dcafuse/geometry.hpp"
#include "dcafuse/random.hpp"
#include "dcafuse/tensor.hpp"

namespace dcafuse {

/// Sparse LiDAR representation: per-point features and metric coordinates.
struct PointFeatureSet {
  Tensor features;  // N x C
  Tensor coords;    // N x 3

  std::size_t size() const { return features.empty() ? 0 : features.dim(0); }

  void validate() const {
    if (features.rank() != 2 || coords.rank() != 2 || coords.dim(1) != 3 || features.dim(0) != coords.dim(0)) {
      throw DimensionError("point set: expected N x C features and N x 3 coords, got " +
                           detail::shape_str(features.shape()) + " and " + detail::shape_str(coords.shape()));
    }
  }

  PointFeatureSet select(std::span<const std::size_t> idx) const {
    const std::size_t c = features.dim(1);
    PointFeatureSet out{Tensor({idx.size(), c}), Tensor({idx.size(), 3})};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(features.row(idx[i]).begin(), c, out.features.row(i).begin());
      std::copy_n(coords.row(idx[i]).begin(), 3, out.coords.row(i).begin());
    }
    return out;
  }
};

/// One camera's multi-level feature maps, level l of shape (H/s_l) x (W/s_l) x C_l.
struct FeaturePyramid {
  std::vector<Tensor> levels;

  std::size_t size() const { return levels.size(); }

  void validate(const Camera& cam, std::size_t needed_levels) const {
    if (levels.size() < needed_levels) {
      throw DimensionError("pyramid: " + std::to_string(levels.size()) + " levels, need " + std::to_string(needed_levels));
    }
    for (std::size_t l = 0; l < levels.size() && l < 4; ++l) {
      const auto& m = levels[l];
      if (m.rank() != 3 || m.dim(0) != cam.height_px / kStrides[l] || m.dim(1) != cam.width_px / kStrides[l]) {
        throw DimensionError("pyramid level " + std::to_string(l) + ": shape " + detail::shape_str(m.shape()) +
                             " does not match image " + std::to_string(cam.height_px) + "x" +
                             std::to_string(cam.width_px) + " at stride " + std::to_string(kStrides[l]));
      }
    }
  }
};

/// Which halves of the query feed the offset and weight heads.
enum class QueryMode { lidar_image, lidar, image };

/// Offset head bias initialisation.
enum class OffsetInit {
  directional,  // M evenly spaced directions, radii 1..D stride-4 pixels
  zero,         // every sample at the reference point
};

struct DcaHyper {
  std::size_t levels = 4;                // L
  std::size_t directions = 8;            // M
  std::size_t points_per_direction = 4;  // D
  std::size_t channels = 16;             // C
  std::size_t head_hidden = 0;           // 0 -> 2C
  std::size_t ffn_hidden = 0;            // 0 -> 2C
  QueryMode query = QueryMode::lidar_image;
  OffsetInit offset_init = OffsetInit::directional;

  std::size_t samples() const { return levels * directions * points_per_direction; }
  std::size_t head_hidden_width() const { return head_hidden ? head_hidden : 2 * channels; }
  std::size_t ffn_hidden_width() const { return ffn_hidden ? ffn_hidden : 2 * channels; }

  void validate() const {
    if (levels < 1 || levels > 4) throw std::invalid_argument("dca.levels must be in 1..4");
    if (directions < 1) throw std::invalid_argument("dca.directions must be >= 1");
    if (points_per_direction < 1) throw std::invalid_argument("dca.points_per_direction must be >= 1");
    if (channels < 1) throw std::invalid_argument("dca.channels must be >= 1");
  }
};

inline const char* to_string(QueryMode q) {
  switch (q) {
    case QueryMode::lidar_image: return "lidar_image";
    case QueryMode::lidar: return "lidar";
    case QueryMode::image: return "image";
  }
  return "?";
}

inline QueryMode query_mode_from_string(const std::string& s) {
  if (s == "lidar_image") return QueryMode::lidar_image;
  if (s == "lidar") return QueryMode::lidar;
  if (s == "image") return QueryMode::image;
  throw std::invalid_argument("unknown query mode '" + s + "'");
}

struct DcaParams {
  DcaHyper hyper;
  Mlp lidar_mlp;                           // C_lidar -> C
  LayerNormParams lidar_norm;              // C
  std::vector<AffineParams> level_unify;   // L of C_l -> C
  std::vector<LayerNormParams> level_norm; // L of C, shared across cameras
  Mlp offset_head;                         // 2C -> 2 * L*M*D
  Mlp weight_head;                         // 2C -> L*M*D
  FfnParams ffn;                           // C -> C

  /// Random initialisation. `ref_width`/`ref_height` convert the initial
  /// directional offsets from pixels to normalized units.
  static DcaParams init(const DcaHyper& h, std::size_t lidar_channels, const std::vector<std::size_t>& level_channels,
                        std::size_t ref_width, std::size_t ref_height, Rng& rng) {
    h.validate();
    if (level_channels.size() < h.levels) throw DimensionError("dca init: fewer level channel counts than levels");
    DcaParams p;
    p.hyper = h;
    const std::size_t c = h.channels, hid = h.head_hidden_width(), s = h.samples();
    p.lidar_mlp = Mlp::glorot({lidar_channels, c}, rng);
    p.lidar_norm = LayerNormParams(c);
    for (std::size_t l = 0; l < h.levels; ++l) {
      p.level_unify.push_back(AffineParams::glorot(c, level_channels[l], rng));
      p.level_norm.emplace_back(c);
    }
    p.offset_head = Mlp::glorot({2 * c, hid, 2 * s}, rng);
    p.weight_head = Mlp::glorot({2 * c, hid, s}, rng);
    p.offset_head.layers.back().weight.fill(0.0);
    p.weight_head.layers.back().weight.fill(0.0);
    p.set_offset_bias(ref_width, ref_height);
    p.ffn = FfnParams::glorot(c, h.ffn_hidden_width(), rng);
    return p;
  }

  void set_offset_bias(std::size_t ref_width, std::size_t ref_height) {
    auto& bias = offset_head.layers.back().bias;
    bias.fill(0.0);
    if (hyper.offset_init == OffsetInit::zero) return;
    const std::size_t m_dirs = hyper.directions, d_pts = hyper.points_per_direction;
    for (std::size_t l = 0; l < hyper.levels; ++l) {
      for (std::size_t m = 0; m < m_dirs; ++m) {
        const Real theta = 2.0 * std::numbers::pi * static_cast<Real>(m) / static_cast<Real>(m_dirs);
        for (std::size_t d = 0; d < d_pts; ++d) {
          const std::size_t j = (l * m_dirs + m) * d_pts + d;
          const Real radius_px = static_cast<Real>(kStrides[0] * (d + 1));
          bias[2 * j] = std::cos(theta) * radius_px / static_cast<Real>(ref_width);
          bias[2 * j + 1] = std::sin(theta) * radius_px / static_cast<Real>(ref_height);
        }
      }
    }
  }

  DcaParams zeros_like() const {
    DcaParams g;
    g.hyper = hyper;
    g.lidar_mlp = lidar_mlp.zeros_like();
    g.lidar_norm = lidar_norm.zeros_like();
    for (const auto& u : level_unify) g.level_unify.push_back(u.zeros_like());
    for (const auto& n : level_norm) g.level_norm.push_back(n.zeros_like());
    g.offset_head = offset_head.zeros_like();
    g.weight_head = weight_head.zeros_like();
    g.ffn = ffn.zeros_like();
    return g;
  }

  /// Visits every learnable tensor as (name, tensor) in a fixed order.
  template <class F>
  void for_each(F&& f) {
    lidar_mlp.for_each("lidar_mlp", f);
    lidar_norm.for_each("lidar_norm", f);
    for (std::size_t l = 0; l < level_unify.size(); ++l) level_unify[l].for_each("level_unify." + std::to_string(l), f);
    for (std::size_t l = 0; l < level_norm.size(); ++l) level_norm[l].for_each("level_norm." + std::to_string(l), f);
    offset_head.for_each("offset_head", f);
    weight_head.for_each("weight_head", f);
    ffn.for_each("ffn", f);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<DcaParams*>(this)->for_each([&](const std::string& name, Tensor& t) { f(name, std::as_const(t)); });
  }

  std::size_t lidar_channels() const { return lidar_mlp.in(); }

  void validate() const {
    hyper.validate();
    const std::size_t c = hyper.channels, s = hyper.samples();
    lidar_mlp.validate("lidar_mlp");
    offset_head.validate("offset_head");
    weight_head.validate("weight_head");
    ffn.validate();
    if (lidar_mlp.out() != c) throw DimensionError("lidar_mlp must output C channels");
    if (lidar_channels() != c) throw DimensionError("raw LiDAR width must equal C for the residual sum");
    if (lidar_norm.width() != c) throw DimensionError("lidar_norm width != C");
    if (level_unify.size() != hyper.levels || level_norm.size() != hyper.levels) {
      throw DimensionError("level_unify/level_norm must have L entries");
    }
    for (std::size_t l = 0; l < hyper.levels; ++l) {
      if (level_unify[l].out() != c || level_norm[l].width() != c) throw DimensionError("level unifier must output C channels");
    }
    if (offset_head.in() != 2 * c || offset_head.out() != 2 * s) throw DimensionError("offset_head must map 2C -> 2*L*M*D");
    if (weight_head.in() != 2 * c || weight_head.out() != s) throw DimensionError("weight_head must map 2C -> L*M*D");
    if (ffn.width() != c) throw DimensionError("ffn width != C");
  }

  void validate_inputs(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids,
                       const CameraRig& rig) const {
    validate();
    r.validate();
    if (r.features.dim(1) != lidar_channels()) {
      throw DimensionError("LiDAR features have " + std::to_string(r.features.dim(1)) + " channels, params expect " +
                           std::to_string(lidar_channels()));
    }
    if (pyramids.size() != rig.size()) throw DimensionError("one pyramid per camera required");
    for (std::size_t k = 0; k < rig.size(); ++k) {
      pyramids[k].validate(rig.cameras[k], hyper.levels);
      for (std::size_t l = 0; l < hyper.levels; ++l) {
        if (pyramids[k].levels[l].dim(2) != level_unify[l].in()) {
          throw DimensionError("pyramid level " + std::to_string(l) + " has " +
                               std::to_string(pyramids[k].levels[l].dim(2)) + " channels, unifier expects " +
                               std::to_string(level_unify[l].in()));
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Stand-alone stages. Each is usable on its own and is exactly what the fused
// operator below composes.

/// Channel unification at the reference points of one camera.
struct UnifiedFeatures {
  std::vector<Tensor> image;  // L tensors of N x C: U_l bilinear(I_l, p_ref)
  Tensor lidar;               // N x C: LN(MLP(f))
};

inline UnifiedFeatures unify_channels(const FeaturePyramid& pyramid, std::span<const Real> uv, const PointFeatureSet& r,
                                      const DcaParams& p) {
  r.validate();
  const std::size_t n = r.size(), c = p.hyper.channels;
  if (uv.size() != 2 * n) throw DimensionError("unify_channels: need one uv pair per point");
  if (r.features.dim(1) != p.lidar_mlp.in()) throw DimensionError("unify_channels: LiDAR channel mismatch");
  if (pyramid.size() < p.hyper.levels) throw DimensionError("unify_channels: pyramid has too few levels");
  UnifiedFeatures out;
  out.lidar = Tensor({n, c});
  MlpCache mc;
  LayerNormCache lc;
  for (std::size_t i = 0; i < n; ++i) {
    mlp_apply(p.lidar_mlp, r.features.row(i), mc);
    layer_norm_apply(mlp_output(mc), p.lidar_norm, out.lidar.row(i), lc);
  }
  for (std::size_t l = 0; l < p.hyper.levels; ++l) {
    const Tensor& map = pyramid.levels[l];
    if (map.dim(2) != p.level_unify[l].in()) throw DimensionError("unify_channels: level channel mismatch");
    Tensor u({n, c});
    std::vector<Real> s(map.dim(2));
    for (std::size_t i = 0; i < n; ++i) {
      bilinear_sample_into(map, uv[2 * i], uv[2 * i + 1], s);
      affine_apply(s, p.level_unify[l], u.row(i));
    }
    out.image.push_back(std::move(u));
  }
  return out;
}

struct QueryCache {
  std::vector<LayerNormCache> level_ln;
};

/// query = lidar ++ mean_l LN_l(image_l), width 2C. The halves are zeroed
/// according to the query mode.
inline std::vector<Real> enhance_query(std::span<const Real> unified_lidar,
                                       const std::vector<std::span<const Real>>& unified_image, const DcaParams& p,
                                       QueryCache* cache = nullptr) {
  const std::size_t c = p.hyper.channels, levels = unified_image.size();
  if (unified_lidar.size() != c) throw DimensionError("enhance_query: LiDAR half must have C channels");
  if (levels == 0 || levels > p.level_norm.size()) throw DimensionError("enhance_query: bad level count");
  std::vector<Real> q(2 * c, 0.0);
  if (p.hyper.query != QueryMode::image) std::copy(unified_lidar.begin(), unified_lidar.end(), q.begin());
  QueryCache local;
  QueryCache& qc = cache ? *cache : local;
  qc.level_ln.resize(levels);
  if (p.hyper.query != QueryMode::lidar) {
    std::vector<Real> normed(c);
    const Real inv_l = 1.0 / static_cast<Real>(levels);
    for (std::size_t l = 0; l < levels; ++l) {
      if (unified_image[l].size() != c) throw DimensionError("enhance_query: image features must have C channels");
      layer_norm_apply(unified_image[l], p.level_norm[l], normed, qc.level_ln[l]);
      for (std::size_t i = 0; i < c; ++i) q[c + i] += normed[i] * inv_l;
    }
  }
  return q;
}

/// Backward of enhance_query. grad_lidar and each grad_image[l] are accumulated.
inline void enhance_query_backward(std::span<const Real> grad_query, const QueryCache& cache, const DcaParams& p,
                                   std::span<Real> grad_lidar, std::vector<std::span<Real>> grad_image,
                                   DcaParams* grad_p) {
  const std::size_t c = p.hyper.channels;
  if (p.hyper.query != QueryMode::image) {
    for (std::size_t i = 0; i < c; ++i) grad_lidar[i] += grad_query[i];
  }
  if (p.hyper.query != QueryMode::lidar) {
    const std::size_t levels = grad_image.size();
    const Real inv_l = 1.0 / static_cast<Real>(levels);
    std::vector<Real> g(c);
    for (std::size_t l = 0; l < levels; ++l) {
      for (std::size_t i = 0; i < c; ++i) g[i] = grad_query[c + i] * inv_l;
      layer_norm_apply_backward(cache.level_ln[l], p.level_norm[l], g, grad_image[l],
                                grad_p ? &grad_p->level_norm[l] : nullptr);
    }
  }
}

/// Raw offset-head output, (L*M*D) x 2 flattened, normalized image units.
inline std::vector<Real> predict_offsets(std::span<const Real> query, const DcaParams& p, MlpCache* cache = nullptr) {
  if (query.size() != p.offset_head.in()) throw DimensionError("predict_offsets: query width mismatch");
  MlpCache local;
  MlpCache& mc = cache ? *cache : local;
  mlp_apply(p.offset_head, query, mc);
  auto out = mlp_output(mc);
  return {out.begin(), out.end()};
}

/// Softmax over all L*M*D weight logits jointly.
inline std::vector<Real> predict_weights(std::span<const Real> query, const DcaParams& p, MlpCache* cache = nullptr) {
  if (query.size() != p.weight_head.in()) throw DimensionError("predict_weights: query width mismatch");
  MlpCache local;
  MlpCache& mc = cache ? *cache : local;
  mlp_apply(p.weight_head, query, mc);
  std::vector<Real> w(p.weight_head.out());
  softmax_apply(mlp_output(mc), w);
  return w;
}

/// Per-level partial sums kept for the backward pass.
struct AttendCache {
  std::vector<std::vector<Real>> level_sum;  // L x C_l: sum_{m,d} w_j s_j
  std::vector<Real> level_weight;            // L: sum_{m,d} w_j
};

/// I_value for one camera: sum_j w_j U_l bilinear(I_l, p_ref + offset_j).
inline std::vector<Real> attend_one_to_many(const FeaturePyramid& pyramid, Real u, Real v,
                                            std::span<const Real> offsets, std::span<const Real> weights,
                                            const DcaParams& p, AttendCache* cache = nullptr) {
  const std::size_t levels = p.hyper.levels, md = p.hyper.directions * p.hyper.points_per_direction;
  if (offsets.size() != 2 * levels * md || weights.size() != levels * md) {
    throw DimensionError("attend_one_to_many: offsets/weights do not match L*M*D");
  }
  if (pyramid.size() < levels) throw DimensionError("attend_one_to_many: pyramid has too few levels");
  AttendCache local;
  AttendCache& ac = cache ? *cache : local;
  ac.level_sum.resize(levels);
  ac.level_weight.assign(levels, 0.0);
  std::vector<Real> value(p.hyper.channels, 0.0);
  std::vector<Real> s, unified(p.hyper.channels);
  for (std::size_t l = 0; l < levels; ++l) {
    const Tensor& map = pyramid.levels[l];
    const std::size_t cl = map.dim(2);
    ac.level_sum[l].assign(cl, 0.0);
    s.resize(cl);
    for (std::size_t k = 0; k < md; ++k) {
      const std::size_t j = l * md + k;
      bilinear_sample_into(map, u + offsets[2 * j], v + offsets[2 * j + 1], s);
      const Real w = weights[j];
      for (std::size_t ch = 0; ch < cl; ++ch) ac.level_sum[l][ch] += w * s[ch];
      ac.level_weight[l] += w;
    }
    // U_l S_l + W_l b_l
    const AffineParams& unify = p.level_unify[l];
    for (std::size_t o = 0; o < p.hyper.channels; ++o) {
      Real acc = ac.level_weight[l] * unify.bias[o];
      for (std::size_t ch = 0; ch < cl; ++ch) acc += unify.weight.at(o, ch) * ac.level_sum[l][ch];
      value[o] += acc;
    }
  }
  return value;
}

/// Backward of attend_one_to_many. Accumulates into grad_offsets, grad_weights,
/// the unifier gradients in grad_p, and (if non-null) the level maps.
inline void attend_one_to_many_backward(const FeaturePyramid& pyramid, Real u, Real v, std::span<const Real> offsets,
                                        std::span<const Real> weights, const DcaParams& p, const AttendCache& cache,
                                        std::span<const Real> grad_value, std::span<Real> grad_offsets,
                                        std::span<Real> grad_weights, DcaParams* grad_p,
                                        std::vector<Tensor>* grad_levels) {
  const std::size_t levels = p.hyper.levels, md = p.hyper.directions * p.hyper.points_per_direction;
  const std::size_t c = p.hyper.channels;
  std::vector<Real> t, s, gs;
  for (std::size_t l = 0; l < levels; ++l) {
    const Tensor& map = pyramid.levels[l];
    const AffineParams& unify = p.level_unify[l];
    const std::size_t cl = map.dim(2);
    // t = U_l^T g, bias term g . b_l
    t.assign(cl, 0.0);
    Real gb = 0.0;
    for (std::size_t o = 0; o < c; ++o) {
      const Real g = grad_value[o];
      gb += g * unify.bias[o];
      for (std::size_t ch = 0; ch < cl; ++ch) t[ch] += unify.weight.at(o, ch) * g;
    }
    if (grad_p) {
      AffineParams& gu = grad_p->level_unify[l];
      for (std::size_t o = 0; o < c; ++o) {
        const Real g = grad_value[o];
        gu.bias[o] += cache.level_weight[l] * g;
        for (std::size_t ch = 0; ch < cl; ++ch) gu.weight.at(o, ch) += g * cache.level_sum[l][ch];
      }
    }
    s.resize(cl);
    gs.resize(cl);
    for (std::size_t k = 0; k < md; ++k) {
      const std::size_t j = l * md + k;
      const Real su = u + offsets[2 * j], sv = v + offsets[2 * j + 1];
      bilinear_sample_into(map, su, sv, s);
      Real dot = gb;
      for (std::size_t ch = 0; ch < cl; ++ch) dot += t[ch] * s[ch];
      grad_weights[j] += dot;
      for (std::size_t ch = 0; ch < cl; ++ch) gs[ch] = weights[j] * t[ch];
      bilinear_sample_backward_into(map, su, sv, gs, grad_levels ? &(*grad_levels)[l] : nullptr, &grad_offsets[2 * j]);
    }
  }
}

/// Mean over valid views; the zero vector when no view is valid.
inline std::vector<Real> mean_valid_views(const std::vector<std::vector<Real>>& per_view, std::span<const unsigned char> valid) {
  if (per_view.size() != valid.size()) throw DimensionError("mean_valid_views: one validity flag per view required");
  // Invalid entries are never read, so the width comes from the first valid view.
  std::size_t c = 0;
  for (std::size_t k = 0; k < per_view.size(); ++k) {
    if (valid[k]) {
      c = per_view[k].size();
      break;
    }
    c = std::max(c, per_view[k].size());
  }
  std::vector<Real> out(c, 0.0);
  std::size_t n_valid = 0;
  for (std::size_t k = 0; k < per_view.size(); ++k) {
    if (!valid[k]) continue;
    if (per_view[k].size() != c) throw DimensionError("mean_valid_views: view widths differ");
    ++n_valid;
    for (std::size_t i = 0; i < c; ++i) out[i] += per_view[k][i];
  }
  if (n_valid == 0) return out;
  const Real inv = 1.0 / static_cast<Real>(n_valid);
  for (auto& x : out) x *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Fused operator with cached activations.

struct DcaOutput {
  PointFeatureSet fused;  // N x C features, coords unchanged
  Tensor image_value;     // N x C, I_value per point (after the view mean)
};

struct DcaGrads {
  Tensor lidar;                            // N x C
  std::vector<std::vector<Tensor>> maps;   // K x L, empty unless requested
  DcaParams params;
};

class DynamicCrossAttention {
 public:
  explicit DynamicCrossAttention(const DcaParams& params) : params_(&params) {}

  /// `r` and `pyramids` must outlive the matching backward call.
  DcaOutput forward(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids, const CameraRig& rig,
                    const ReferencePointSet& ref) {
    const DcaParams& p = *params_;
    p.validate_inputs(r, pyramids, rig);
    if (ref.cameras != rig.size() || ref.points != r.size()) throw DimensionError("reference points do not match input");
    const std::size_t n_pts = r.size(), n_cams = rig.size(), c = p.hyper.channels, levels = p.hyper.levels;

    cache_.emplace();
    Cache& cc = *cache_;
    cc.input = &r;
    cc.pyramids = &pyramids;
    cc.ref = ref;
    cc.points.resize(n_pts);

    DcaOutput out{PointFeatureSet{Tensor({n_pts, c}), r.coords}, Tensor({n_pts, c})};
    std::vector<std::span<const Real>> img_spans(levels);
    std::vector<Real> raw;
    for (std::size_t n = 0; n < n_pts; ++n) {
      PointCache& pc = cc.points[n];
      mlp_apply(p.lidar_mlp, r.features.row(n), pc.lidar_mlp);
      pc.lidar_query.resize(c);
      layer_norm_apply(mlp_output(pc.lidar_mlp), p.lidar_norm, pc.lidar_query, pc.lidar_ln);

      pc.views.assign(n_cams, ViewCache{});
      std::vector<std::vector<Real>> values(n_cams, std::vector<Real>(c, 0.0));
      std::vector<unsigned char> valid(n_cams, 0);
      for (std::size_t k = 0; k < n_cams; ++k) {
        if (!ref.is_valid(k, n)) continue;
        valid[k] = 1;
        ViewCache& vc = pc.views[k];
        const Real u = ref.u(k, n), v = ref.v(k, n);
        vc.level_raw.resize(levels);
        vc.level_unified.resize(levels);
        for (std::size_t l = 0; l < levels; ++l) {
          const Tensor& map = pyramids[k].levels[l];
          vc.level_raw[l].resize(map.dim(2));
          bilinear_sample_into(map, u, v, vc.level_raw[l]);
          vc.level_unified[l].resize(c);
          affine_apply(vc.level_raw[l], p.level_unify[l], vc.level_unified[l]);
          img_spans[l] = vc.level_unified[l];
        }
        vc.query = enhance_query(pc.lidar_query, img_spans, p, &vc.query_cache);
        vc.offsets = predict_offsets(vc.query, p, &vc.offset_cache);
        vc.weights = predict_weights(vc.query, p, &vc.weight_cache);
        values[k] = attend_one_to_many(pyramids[k], u, v, vc.offsets, vc.weights, p, &vc.attend);
      }
      pc.n_valid = 0;
      for (auto f : valid) pc.n_valid += f;
      const std::vector<Real> iv = mean_valid_views(values, valid);
      std::vector<Real> h(c);
      for (std::size_t i = 0; i < c; ++i) {
        out.image_value.at(n, i) = iv[i];
        h[i] = r.features.at(n, i) + out.image_value.at(n, i);
      }
      mlp_apply(p.ffn.mlp, h, pc.ffn);
      std::copy_n(mlp_output(pc.ffn).begin(), c, out.fused.features.row(n).begin());
    }
    return out;
  }

  DcaOutput forward(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids, const CameraRig& rig) {
    return forward(r, pyramids, rig, project(rig, r.coords));
  }

  /// Gradients of a scalar loss given d loss / d fused features (N x C).
  /// Map gradients are computed only when `with_map_grads` is set.
  DcaGrads backward(const Tensor& grad_fused, bool with_map_grads = true) const {
    if (!cache_) throw StateError("dca backward called without a preceding forward");
    const DcaParams& p = *params_;
    const Cache& cc = *cache_;
    const PointFeatureSet& r = *cc.input;
    const auto& pyramids = *cc.pyramids;
    const std::size_t n_pts = r.size(), n_cams = pyramids.size(), c = p.hyper.channels, levels = p.hyper.levels;
    grad_fused.require_shape({n_pts, c}, "dca backward grad_fused");

    DcaGrads g{r.features.zeros_like(), {}, p.zeros_like()};
    if (with_map_grads) {
      g.maps.resize(n_cams);
      for (std::size_t k = 0; k < n_cams; ++k) {
        for (std::size_t l = 0; l < levels; ++l) g.maps[k].push_back(pyramids[k].levels[l].zeros_like());
      }
    }

    std::vector<Real> gh, g_lidar_query(c), g_query, g_off, g_w, g_logits, g_raw;
    std::vector<std::vector<Real>> g_unified(levels, std::vector<Real>(c));
    for (std::size_t n = 0; n < n_pts; ++n) {
      const PointCache& pc = cc.points[n];
      gh.assign(c, 0.0);
      mlp_apply_backward(p.ffn.mlp, pc.ffn, grad_fused.row(n), gh, &g.params.ffn.mlp);
      auto gl = g.lidar.row(n);
      for (std::size_t i = 0; i < c; ++i) gl[i] += gh[i];

      std::fill(g_lidar_query.begin(), g_lidar_query.end(), 0.0);
      if (pc.n_valid > 0) {
        const Real inv_k = 1.0 / static_cast<Real>(pc.n_valid);
        std::vector<Real> g_view(c);
        for (std::size_t i = 0; i < c; ++i) g_view[i] = gh[i] * inv_k;
        for (std::size_t k = 0; k < n_cams; ++k) {
          if (!cc.ref.is_valid(k, n)) continue;
          const ViewCache& vc = pc.views[k];
          const Real u = cc.ref.u(k, n), v = cc.ref.v(k, n);
          const std::size_t s = p.hyper.samples();
          g_off.assign(2 * s, 0.0);
          g_w.assign(s, 0.0);
          attend_one_to_many_backward(pyramids[k], u, v, vc.offsets, vc.weights, p, vc.attend, g_view, g_off, g_w,
                                      &g.params, with_map_grads ? &g.maps[k] : nullptr);
          g_logits.assign(s, 0.0);
          softmax_apply_backward(vc.weights, g_w, g_logits);
          g_query.assign(2 * c, 0.0);
          mlp_apply_backward(p.weight_head, vc.weight_cache, g_logits, g_query, &g.params.weight_head);
          mlp_apply_backward(p.offset_head, vc.offset_cache, g_off, g_query, &g.params.offset_head);

          std::vector<std::span<Real>> gi_spans;
          for (std::size_t l = 0; l < levels; ++l) {
            std::fill(g_unified[l].begin(), g_unified[l].end(), 0.0);
            gi_spans.emplace_back(g_unified[l]);
          }
          enhance_query_backward(g_query, vc.query_cache, p, g_lidar_query, gi_spans, &g.params);
          if (p.hyper.query == QueryMode::lidar) continue;
          for (std::size_t l = 0; l < levels; ++l) {
            g_raw.assign(vc.level_raw[l].size(), 0.0);
            affine_apply_backward(vc.level_raw[l], p.level_unify[l], g_unified[l], g_raw, &g.params.level_unify[l]);
            if (with_map_grads) {
              bilinear_sample_backward_into(pyramids[k].levels[l], u, v, g_raw, &g.maps[k][l], nullptr);
            }
          }
        }
      }
      std::vector<Real> g_mlp_out(c, 0.0);
      layer_norm_apply_backward(pc.lidar_ln, p.lidar_norm, g_lidar_query, g_mlp_out, &g.params.lidar_norm);
      mlp_apply_backward(p.lidar_mlp, pc.lidar_mlp, g_mlp_out, gl, &g.params.lidar_mlp);
    }
    return g;
  }

  bool has_cache() const { return cache_.has_value(); }

 private:
  struct ViewCache {
    std::vector<std::vector<Real>> level_raw;      // L x C_l at p_ref
    std::vector<std::vector<Real>> level_unified;  // L x C
    QueryCache query_cache;
    std::vector<Real> query;
    MlpCache offset_cache, weight_cache;
    std::vector<Real> offsets, weights;
    AttendCache attend;
  };
  struct PointCache {
    MlpCache lidar_mlp;
    LayerNormCache lidar_ln;
    std::vector<Real> lidar_query;
    std::vector<ViewCache> views;
    std::size_t n_valid = 0;
    MlpCache ffn;
  };
  struct Cache {
    const PointFeatureSet* input = nullptr;
    const std::vector<FeaturePyramid>* pyramids = nullptr;
    ReferencePointSet ref;
    std::vector<PointCache> points;
  };

  const DcaParams* params_;
  std::optional<Cache> cache_;
};

/// Projects through `rig` and fuses; no activations are retained.
inline PointFeatureSet dca_forward(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids,
                                   const CameraRig& rig, const DcaParams& params) {
  DynamicCrossAttention op(params);
  return op.forward(r, pyramids, rig).fused;
}

}  // namespace dcafuse
