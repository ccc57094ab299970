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

// Central finite-difference checks of every analytic backward pass.
//
// Each registered primitive builds a random instance from a seed and exposes
// a scalar loss sum(c * output) over a set of tensors, plus the analytic
// gradient of that loss. Elements whose error exceeds the tolerance are
// re-differenced with a quarter step; if the two numeric estimates disagree
// the instance straddles a kink (ReLU, bilinear cell edge) and is redrawn.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcafuse/baseline.hpp"
#include "dcafuse/dca.hpp"
#include "dcafuse/diffcore.hpp"
#include "dcafuse/random.hpp"
#include "dcafuse/synthscene.hpp"
#include "dcafuse/trainer.hpp"

namespace dcafuse {

struct GradProbe {
  std::vector<std::pair<std::string, Tensor*>> wrt;
  std::function<Real()> loss;
  std::function<std::vector<Tensor>()> analytic;  // aligned with wrt
  std::shared_ptr<void> state;                    // keeps the instance alive
};

struct GradcheckPrimitive {
  std::string name;
  bool end_to_end = false;
  std::function<GradProbe(std::uint64_t seed)> make;
};

struct GradcheckSettings {
  std::size_t seeds = 20;
  Real step = 1e-4;
  Real rtol = 1e-4;
  Real rtol_end_to_end = 1e-3;
  Real floor = 1e-6;
  std::size_t max_retries = 8;
  std::uint64_t seed = 0;
  std::string inject_fault;  // primitive whose analytic gradient is corrupted

  void validate() const {
    if (seeds == 0) throw std::invalid_argument("gradcheck.seeds must be positive");
    if (!(step > 0.0)) throw std::invalid_argument("gradcheck.step must be > 0");
    if (!(rtol > 0.0) || !(rtol_end_to_end > 0.0)) throw std::invalid_argument("gradcheck.rtol must be > 0");
  }
};

struct GradcheckResult {
  std::string name;
  Real tolerance = 0.0;
  Real max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t seeds = 0;
  std::size_t retries = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;
  double wall_time_s = 0.0;

  bool passed() const {
    for (const auto& r : results) {
      if (!r.passed) return false;
    }
    return !results.empty();
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : results) {
      if (!r.passed) out.push_back(r.name);
    }
    return out;
  }
};

namespace detail {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, Real scale = 1.0, Real shift = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = shift + scale * rng.normal();
  return t;
}

inline Real dot(std::span<const Real> a, std::span<const Real> b) {
  Real s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Every tensor gets fresh values; LN gains stay near 1, offsets stay small.
inline void randomize(DcaParams& p, Rng& rng) {
  p.for_each([&](const std::string& name, Tensor& t) {
    const bool gamma = name.ends_with(".gamma");
    const bool offset_out = name.starts_with("offset_head." + std::to_string(p.offset_head.layers.size() - 1));
    const Real scale = offset_out ? 0.02 : (gamma ? 0.2 : 0.4);
    for (auto& v : t.vec()) v = (gamma ? 1.0 : 0.0) + scale * rng.normal();
  });
}

inline DcaHyper gradcheck_hyper() {
  DcaHyper h;
  h.levels = 2;
  h.directions = 2;
  h.points_per_direction = 2;
  h.channels = 4;
  return h;
}

inline FeaturePyramid random_pyramid(std::size_t px, std::size_t levels, std::size_t channels, Rng& rng) {
  FeaturePyramid pyr;
  for (std::size_t l = 0; l < levels; ++l) {
    pyr.levels.push_back(random_tensor({px / kStrides[l], px / kStrides[l], channels}, rng));
  }
  return pyr;
}

inline void append_params(GradProbe& probe, DcaParams& p) {
  p.for_each([&](const std::string& name, Tensor& t) { probe.wrt.emplace_back(name, &t); });
}

inline void append_grads(std::vector<Tensor>& out, DcaParams& g) {
  g.for_each([&](const std::string&, Tensor& t) { out.push_back(t); });
}

// ---------------------------------------------------------------------------
// Probe factories

inline GradProbe probe_affine(std::uint64_t seed) {
  struct S { Tensor x, c; AffineParams p; };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  s->x = random_tensor({3, 5}, rng);
  s->p = AffineParams::glorot(4, 5, rng);
  s->p.bias = random_tensor({4}, rng);
  s->c = random_tensor({3, 4}, rng);
  GradProbe g;
  g.wrt = {{"x", &s->x}, {"weight", &s->p.weight}, {"bias", &s->p.bias}};
  g.loss = [s] { return dot(affine_forward(s->x, s->p).data(), s->c.data()); };
  g.analytic = [s] {
    auto r = affine_backward(s->x, s->p, s->c);
    return std::vector<Tensor>{r.x, r.params.weight, r.params.bias};
  };
  g.state = s;
  return g;
}

inline GradProbe probe_layer_norm(std::uint64_t seed) {
  struct S { Tensor x, c; LayerNormParams p; };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  s->x = random_tensor({3, 6}, rng, 2.0, 0.5);
  s->p = LayerNormParams(6);
  s->p.gamma = random_tensor({6}, rng, 0.3, 1.0);
  s->p.beta = random_tensor({6}, rng, 0.3);
  s->c = random_tensor({3, 6}, rng);
  GradProbe g;
  g.wrt = {{"x", &s->x}, {"gamma", &s->p.gamma}, {"beta", &s->p.beta}};
  g.loss = [s] { return dot(layer_norm_forward(s->x, s->p).data(), s->c.data()); };
  g.analytic = [s] {
    auto r = layer_norm_backward(s->x, s->p, s->c);
    return std::vector<Tensor>{r.x, r.params.gamma, r.params.beta};
  };
  g.state = s;
  return g;
}

inline GradProbe probe_softmax(std::uint64_t seed) {
  struct S { Tensor x, c; };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  s->x = random_tensor({3, 5}, rng, 1.5);
  s->c = random_tensor({3, 5}, rng);
  GradProbe g;
  g.wrt = {{"logits", &s->x}};
  g.loss = [s] { return dot(softmax_forward(s->x).data(), s->c.data()); };
  g.analytic = [s] { return std::vector<Tensor>{softmax_backward(softmax_forward(s->x), s->c)}; };
  g.state = s;
  return g;
}

inline GradProbe probe_bilinear(std::uint64_t seed) {
  struct S { Tensor map, uv, c; };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  s->map = random_tensor({6, 7, 3}, rng);
  s->uv = Tensor({2}, std::vector<Real>{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)});
  s->c = random_tensor({3}, rng);
  GradProbe g;
  g.wrt = {{"map", &s->map}, {"uv", &s->uv}};
  g.loss = [s] { return dot(bilinear_sample(s->map, s->uv[0], s->uv[1]), s->c.data()); };
  g.analytic = [s] {
    auto r = bilinear_sample_backward(s->map, s->uv[0], s->uv[1], s->c.data());
    return std::vector<Tensor>{r.map, Tensor({2}, std::vector<Real>{r.uv[0], r.uv[1]})};
  };
  g.state = s;
  return g;
}

inline GradProbe probe_ffn(std::uint64_t seed) {
  struct S { Tensor x, c; FfnParams p; };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  s->x = random_tensor({3, 4}, rng);
  s->p = FfnParams::glorot(4, 8, rng);
  for (auto& l : s->p.mlp.layers) l.bias = random_tensor({l.out()}, rng, 0.3);
  s->c = random_tensor({3, 4}, rng);
  GradProbe g;
  g.wrt = {{"x", &s->x}};
  s->p.for_each("ffn", [&](const std::string& n, Tensor& t) { g.wrt.emplace_back(n, &t); });
  g.loss = [s] { return dot(ffn_forward(s->x, s->p).data(), s->c.data()); };
  g.analytic = [s] {
    auto r = ffn_backward(s->x, s->p, s->c);
    std::vector<Tensor> out{r.x};
    r.params.for_each("ffn", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  };
  g.state = s;
  return g;
}

inline GradProbe probe_unify_channels(std::uint64_t seed) {
  struct S {
    FeaturePyramid pyr;
    PointFeatureSet r;
    Tensor uv, c_lidar;
    std::vector<Tensor> c_image;
    DcaParams p;
  };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  const DcaHyper h = gradcheck_hyper();
  const std::size_t n = 3, c = h.channels, ci = 3;
  s->pyr = random_pyramid(32, h.levels, ci, rng);
  s->r = PointFeatureSet{random_tensor({n, c}, rng), random_tensor({n, 3}, rng)};
  s->uv = Tensor({2 * n});
  for (auto& v : s->uv.vec()) v = rng.uniform(0.0, 1.0);
  s->p = DcaParams::init(h, c, std::vector<std::size_t>(h.levels, ci), 32, 32, rng);
  randomize(s->p, rng);
  s->c_lidar = random_tensor({n, c}, rng);
  for (std::size_t l = 0; l < h.levels; ++l) s->c_image.push_back(random_tensor({n, c}, rng));

  GradProbe g;
  g.wrt = {{"lidar", &s->r.features}, {"uv", &s->uv}};
  for (std::size_t l = 0; l < h.levels; ++l) g.wrt.emplace_back("map." + std::to_string(l), &s->pyr.levels[l]);
  append_params(g, s->p);
  g.loss = [s] {
    const UnifiedFeatures u = unify_channels(s->pyr, s->uv.data(), s->r, s->p);
    Real total = dot(u.lidar.data(), s->c_lidar.data());
    for (std::size_t l = 0; l < u.image.size(); ++l) total += dot(u.image[l].data(), s->c_image[l].data());
    return total;
  };
  g.analytic = [s] {
    const DcaParams& p = s->p;
    const std::size_t n = s->r.size(), c = p.hyper.channels;
    Tensor g_lidar = s->r.features.zeros_like(), g_uv = s->uv.zeros_like();
    std::vector<Tensor> g_maps;
    for (const auto& m : s->pyr.levels) g_maps.push_back(m.zeros_like());
    DcaParams gp = p.zeros_like();
    MlpCache mc;
    LayerNormCache lc;
    std::vector<Real> y(c), g_mid(c), samp, g_samp;
    for (std::size_t i = 0; i < n; ++i) {
      mlp_apply(p.lidar_mlp, s->r.features.row(i), mc);
      layer_norm_apply(mlp_output(mc), p.lidar_norm, y, lc);
      std::fill(g_mid.begin(), g_mid.end(), 0.0);
      layer_norm_apply_backward(lc, p.lidar_norm, s->c_lidar.row(i), g_mid, &gp.lidar_norm);
      mlp_apply_backward(p.lidar_mlp, mc, g_mid, g_lidar.row(i), &gp.lidar_mlp);
    }
    for (std::size_t l = 0; l < p.hyper.levels; ++l) {
      const Tensor& map = s->pyr.levels[l];
      samp.resize(map.dim(2));
      for (std::size_t i = 0; i < n; ++i) {
        const Real u = s->uv[2 * i], v = s->uv[2 * i + 1];
        bilinear_sample_into(map, u, v, samp);
        g_samp.assign(map.dim(2), 0.0);
        affine_apply_backward(samp, p.level_unify[l], s->c_image[l].row(i), g_samp, &gp.level_unify[l]);
        bilinear_sample_backward_into(map, u, v, g_samp, &g_maps[l], &g_uv[2 * i]);
      }
    }
    std::vector<Tensor> out{g_lidar, g_uv};
    for (auto& m : g_maps) out.push_back(m);
    append_grads(out, gp);
    return out;
  };
  g.state = s;
  return g;
}

inline GradProbe probe_enhance_query(std::uint64_t seed) {
  struct S {
    Tensor lidar, c;
    std::vector<Tensor> image;
    DcaParams p;
  };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  const DcaHyper h = gradcheck_hyper();
  const std::size_t c = h.channels;
  s->p = DcaParams::init(h, c, std::vector<std::size_t>(h.levels, 3), 32, 32, rng);
  randomize(s->p, rng);
  s->lidar = random_tensor({c}, rng);
  for (std::size_t l = 0; l < h.levels; ++l) s->image.push_back(random_tensor({c}, rng, 1.5, 0.2));
  s->c = random_tensor({2 * c}, rng);
  GradProbe g;
  g.wrt = {{"lidar", &s->lidar}};
  for (std::size_t l = 0; l < h.levels; ++l) g.wrt.emplace_back("image." + std::to_string(l), &s->image[l]);
  for (std::size_t l = 0; l < h.levels; ++l) {
    s->p.level_norm[l].for_each("level_norm." + std::to_string(l),
                                [&](const std::string& n, Tensor& t) { g.wrt.emplace_back(n, &t); });
  }
  auto spans = [s] {
    std::vector<std::span<const Real>> out;
    for (const auto& t : s->image) out.push_back(t.data());
    return out;
  };
  g.loss = [s, spans] { return dot(enhance_query(s->lidar.data(), spans(), s->p), s->c.data()); };
  g.analytic = [s, spans] {
    QueryCache qc;
    enhance_query(s->lidar.data(), spans(), s->p, &qc);
    Tensor g_lidar = s->lidar.zeros_like();
    std::vector<Tensor> g_image;
    std::vector<std::span<Real>> g_spans;
    for (const auto& t : s->image) g_image.push_back(t.zeros_like());
    for (auto& t : g_image) g_spans.push_back(t.data());
    DcaParams gp = s->p.zeros_like();
    enhance_query_backward(s->c.data(), qc, s->p, g_lidar.data(), g_spans, &gp);
    std::vector<Tensor> out{g_lidar};
    for (auto& t : g_image) out.push_back(t);
    for (auto& ln : gp.level_norm) {
      out.push_back(ln.gamma);
      out.push_back(ln.beta);
    }
    return out;
  };
  g.state = s;
  return g;
}

/// Shared body of the offset and weight head checks.
inline GradProbe probe_head(std::uint64_t seed, bool weights) {
  struct S { Tensor q, c; DcaParams p; };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  const DcaHyper h = gradcheck_hyper();
  s->p = DcaParams::init(h, h.channels, std::vector<std::size_t>(h.levels, 3), 32, 32, rng);
  randomize(s->p, rng);
  Mlp& head = weights ? s->p.weight_head : s->p.offset_head;
  for (auto& v : head.layers.back().weight.vec()) v = 0.4 * rng.normal();
  s->q = random_tensor({2 * h.channels}, rng);
  s->c = random_tensor({head.out()}, rng);
  GradProbe g;
  g.wrt = {{"query", &s->q}};
  head.for_each(weights ? "weight_head" : "offset_head", [&](const std::string& n, Tensor& t) { g.wrt.emplace_back(n, &t); });
  g.loss = [s, weights] {
    return dot(weights ? predict_weights(s->q.data(), s->p) : predict_offsets(s->q.data(), s->p), s->c.data());
  };
  g.analytic = [s, weights] {
    const Mlp& head = weights ? s->p.weight_head : s->p.offset_head;
    MlpCache mc;
    std::vector<Real> g_out(s->c.vec());
    if (weights) {
      const std::vector<Real> w = predict_weights(s->q.data(), s->p, &mc);
      std::vector<Real> g_logits(w.size(), 0.0);
      softmax_apply_backward(w, s->c.data(), g_logits);
      g_out = g_logits;
    } else {
      predict_offsets(s->q.data(), s->p, &mc);
    }
    Tensor g_q = s->q.zeros_like();
    Mlp gh = head.zeros_like();
    mlp_apply_backward(head, mc, g_out, g_q.data(), &gh);
    std::vector<Tensor> out{g_q};
    gh.for_each("", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  };
  g.state = s;
  return g;
}

inline GradProbe probe_attend_one_to_many(std::uint64_t seed) {
  struct S {
    FeaturePyramid pyr;
    Tensor uv, offsets, weights, c;
    DcaParams p;
  };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  const DcaHyper h = gradcheck_hyper();
  const std::size_t ci = 3;
  s->pyr = random_pyramid(32, h.levels, ci, rng);
  s->p = DcaParams::init(h, h.channels, std::vector<std::size_t>(h.levels, ci), 32, 32, rng);
  randomize(s->p, rng);
  s->uv = Tensor({2}, std::vector<Real>{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)});
  s->offsets = random_tensor({2 * h.samples()}, rng, 0.08);
  s->weights = Tensor({h.samples()});
  for (auto& w : s->weights.vec()) w = rng.uniform(0.0, 1.0);
  s->c = random_tensor({h.channels}, rng);
  GradProbe g;
  g.wrt = {{"offsets", &s->offsets}, {"weights", &s->weights}};
  for (std::size_t l = 0; l < h.levels; ++l) g.wrt.emplace_back("map." + std::to_string(l), &s->pyr.levels[l]);
  for (std::size_t l = 0; l < h.levels; ++l) {
    s->p.level_unify[l].for_each("level_unify." + std::to_string(l),
                                 [&](const std::string& n, Tensor& t) { g.wrt.emplace_back(n, &t); });
  }
  g.loss = [s] {
    return dot(attend_one_to_many(s->pyr, s->uv[0], s->uv[1], s->offsets.data(), s->weights.data(), s->p), s->c.data());
  };
  g.analytic = [s] {
    AttendCache ac;
    attend_one_to_many(s->pyr, s->uv[0], s->uv[1], s->offsets.data(), s->weights.data(), s->p, &ac);
    Tensor g_off = s->offsets.zeros_like(), g_w = s->weights.zeros_like();
    std::vector<Tensor> g_maps;
    for (const auto& m : s->pyr.levels) g_maps.push_back(m.zeros_like());
    DcaParams gp = s->p.zeros_like();
    attend_one_to_many_backward(s->pyr, s->uv[0], s->uv[1], s->offsets.data(), s->weights.data(), s->p, ac,
                                s->c.data(), g_off.data(), g_w.data(), &gp, &g_maps);
    std::vector<Tensor> out{g_off, g_w};
    for (auto& m : g_maps) out.push_back(m);
    for (auto& u : gp.level_unify) {
      out.push_back(u.weight);
      out.push_back(u.bias);
    }
    return out;
  };
  g.state = s;
  return g;
}

inline GradProbe probe_mean_valid_views(std::uint64_t seed) {
  struct S {
    std::vector<Tensor> views;
    std::vector<unsigned char> valid;
    Tensor c;
  };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  const std::size_t k = 4, c = 5;
  for (std::size_t i = 0; i < k; ++i) {
    s->views.push_back(random_tensor({c}, rng));
    s->valid.push_back(rng.uniform(0.0, 1.0) < 0.6 ? 1 : 0);
  }
  s->valid[rng.index(k)] = 1;
  s->c = random_tensor({c}, rng);
  GradProbe g;
  for (std::size_t i = 0; i < k; ++i) g.wrt.emplace_back("view." + std::to_string(i), &s->views[i]);
  g.loss = [s] {
    std::vector<std::vector<Real>> pv;
    for (const auto& t : s->views) pv.push_back(t.vec());
    return dot(mean_valid_views(pv, s->valid), s->c.data());
  };
  g.analytic = [s] {
    std::size_t n_valid = 0;
    for (auto f : s->valid) n_valid += f;
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < s->views.size(); ++i) {
      Tensor t = s->views[i].zeros_like();
      if (s->valid[i]) {
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = s->c[j] / static_cast<Real>(n_valid);
      }
      out.push_back(t);
    }
    return out;
  };
  g.state = s;
  return g;
}

inline SceneConfig gradcheck_scene(std::uint64_t seed, std::size_t lidar_channels) {
  SceneConfig sc;
  sc.n_points = 5;
  sc.n_cameras = 2;
  sc.image_px = 64;
  sc.texture_scale = 1.0;
  sc.lidar_channels = lidar_channels;
  sc.seed = seed;
  return sc;
}

inline GradProbe probe_dca(std::uint64_t seed) {
  struct S {
    LabeledScene scene;
    DcaParams p;
    Tensor c;
  };
  auto s = std::make_shared<S>();
  Rng rng(derive_seed(seed, "params"));
  const DcaHyper h = gradcheck_hyper();
  s->scene = generate_scene(gradcheck_scene(seed, h.channels));
  s->p = DcaParams::init(h, h.channels, std::vector<std::size_t>(h.levels, s->scene.config.image_channels()), 64, 64, rng);
  randomize(s->p, rng);
  s->c = random_tensor({s->scene.points.size(), h.channels}, rng);
  GradProbe g;
  g.wrt = {{"lidar", &s->scene.points.features}};
  for (std::size_t k = 0; k < s->scene.pyramids.size(); ++k) {
    for (std::size_t l = 0; l < h.levels; ++l) {
      g.wrt.emplace_back("map." + std::to_string(k) + "." + std::to_string(l), &s->scene.pyramids[k].levels[l]);
    }
  }
  append_params(g, s->p);
  g.loss = [s] {
    return dot(dca_forward(s->scene.points, s->scene.pyramids, s->scene.rig, s->p).features.data(), s->c.data());
  };
  g.analytic = [s] {
    DynamicCrossAttention op(s->p);
    op.forward(s->scene.points, s->scene.pyramids, s->scene.rig);
    DcaGrads dg = op.backward(s->c, true);
    std::vector<Tensor> out{dg.lidar};
    for (std::size_t k = 0; k < dg.maps.size(); ++k) {
      for (std::size_t l = 0; l < s->p.hyper.levels; ++l) out.push_back(dg.maps[k][l]);
    }
    append_grads(out, dg.params);
    return out;
  };
  g.state = s;
  return g;
}

inline GradProbe probe_one_to_one(std::uint64_t seed) {
  struct S {
    LabeledScene scene;
    OneToOneParams p;
    Tensor c;
  };
  auto s = std::make_shared<S>();
  Rng rng(derive_seed(seed, "params"));
  s->scene = generate_scene(gradcheck_scene(seed, 4));
  s->p = OneToOneParams::init(4, s->scene.config.image_channels(), 4, rng);
  s->p.fuse.bias = random_tensor({4}, rng);
  s->c = random_tensor({s->scene.points.size(), 4}, rng);
  GradProbe g;
  g.wrt = {{"lidar", &s->scene.points.features}, {"fuse.weight", &s->p.fuse.weight}, {"fuse.bias", &s->p.fuse.bias}};
  g.loss = [s] {
    return dot(one_to_one_fuse(s->scene.points, s->scene.pyramids, s->scene.rig, s->p).features.data(), s->c.data());
  };
  g.analytic = [s] {
    OneToOneFusion op(s->p);
    op.forward(s->scene.points, s->scene.pyramids, s->scene.rig);
    OneToOneGrads og = op.backward(s->c);
    return std::vector<Tensor>{og.lidar, og.params.fuse.weight, og.params.fuse.bias};
  };
  g.state = s;
  return g;
}

inline GradProbe probe_cross_entropy(std::uint64_t seed) {
  struct S {
    Tensor logits;
    std::vector<int> labels;
  };
  auto s = std::make_shared<S>();
  Rng rng(seed);
  s->logits = random_tensor({5, 4}, rng, 2.0);
  for (std::size_t i = 0; i < 5; ++i) s->labels.push_back(static_cast<int>(rng.index(4)));
  GradProbe g;
  g.wrt = {{"logits", &s->logits}};
  g.loss = [s] { return cross_entropy_loss(s->logits, s->labels).loss; };
  g.analytic = [s] { return std::vector<Tensor>{cross_entropy_loss(s->logits, s->labels).grad}; };
  g.state = s;
  return g;
}

}  // namespace detail

/// Every primitive with an analytic backward, in report order.
inline const std::vector<GradcheckPrimitive>& gradcheck_registry() {
  static const std::vector<GradcheckPrimitive> registry = {
      {"affine", false, detail::probe_affine},
      {"layer_norm", false, detail::probe_layer_norm},
      {"softmax", false, detail::probe_softmax},
      {"bilinear", false, detail::probe_bilinear},
      {"ffn", false, detail::probe_ffn},
      {"unify_channels", false, detail::probe_unify_channels},
      {"enhance_query", false, detail::probe_enhance_query},
      {"predict_offsets", false, [](std::uint64_t s) { return detail::probe_head(s, false); }},
      {"predict_weights", false, [](std::uint64_t s) { return detail::probe_head(s, true); }},
      {"attend_one_to_many", false, detail::probe_attend_one_to_many},
      {"mean_valid_views", false, detail::probe_mean_valid_views},
      {"one_to_one", false, detail::probe_one_to_one},
      {"cross_entropy", false, detail::probe_cross_entropy},
      {"dca", true, detail::probe_dca},
  };
  return registry;
}

namespace detail {

struct ProbeOutcome {
  bool kinked = false;
  Real max_rel_error = 0.0;
  std::string worst_tensor;
};

inline ProbeOutcome check_probe(GradProbe& probe, bool corrupt, Real h, Real tol, Real floor) {
  std::vector<Tensor> analytic = probe.analytic();
  if (analytic.size() != probe.wrt.size()) throw std::logic_error("gradcheck: analytic gradient count mismatch");
  if (corrupt) {
    for (auto& v : analytic.front().vec()) v = 1.1 * v + 1e-2;
  }
  ProbeOutcome out;
  for (std::size_t t = 0; t < probe.wrt.size(); ++t) {
    Tensor& x = *probe.wrt[t].second;
    const Tensor& a = analytic[t];
    x.require_same_shape(a, "gradcheck analytic gradient");
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Real orig = x[i];
      auto diff = [&](Real step) {
        x[i] = orig + step;
        const Real fp = probe.loss();
        x[i] = orig - step;
        const Real fm = probe.loss();
        x[i] = orig;
        return (fp - fm) / (2.0 * step);
      };
      const Real num = diff(h);
      auto rel = [&](Real p, Real q) { return std::abs(p - q) / std::max({std::abs(p), std::abs(q), floor}); };
      Real err = rel(a[i], num);
      if (err > tol) {
        const Real fine = diff(h / 4.0);
        if (rel(num, fine) > tol) {
          out.kinked = true;
          return out;
        }
      }
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst_tensor = probe.wrt[t].first;
      }
    }
  }
  return out;
}

}  // namespace detail

inline GradcheckResult gradcheck_primitive(const GradcheckPrimitive& prim, const GradcheckSettings& s) {
  GradcheckResult r;
  r.name = prim.name;
  r.tolerance = prim.end_to_end ? s.rtol_end_to_end : s.rtol;
  const bool corrupt = s.inject_fault == prim.name;
  r.passed = true;
  for (std::size_t i = 0; i < s.seeds; ++i) {
    bool done = false;
    for (std::size_t attempt = 0; attempt <= s.max_retries && !done; ++attempt) {
      const std::uint64_t seed =
          derive_seed(s.seed, "gradcheck/" + prim.name + "/" + std::to_string(i) + "/" + std::to_string(attempt));
      GradProbe probe = prim.make(seed);
      const detail::ProbeOutcome o = detail::check_probe(probe, corrupt, s.step, r.tolerance, s.floor);
      if (o.kinked) {
        ++r.retries;
        continue;
      }
      done = true;
      if (o.max_rel_error >= r.max_rel_error) {
        r.max_rel_error = o.max_rel_error;
        r.worst_tensor = o.worst_tensor;
      }
    }
    if (!done) {
      r.passed = false;
      r.worst_tensor = "no kink-free instance after retries";
      r.max_rel_error = std::numeric_limits<Real>::infinity();
      break;
    }
    ++r.seeds;
  }
  r.passed = r.passed && r.max_rel_error <= r.tolerance;
  return r;
}

inline GradcheckReport run_gradcheck(const GradcheckSettings& s) {
  s.validate();
  if (!s.inject_fault.empty()) {
    bool known = false;
    for (const auto& p : gradcheck_registry()) known = known || p.name == s.inject_fault;
    if (!known) throw std::invalid_argument("gradcheck.inject_fault names no registered primitive");
  }
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport report;
  for (const auto& prim : gradcheck_registry()) report.results.push_back(gradcheck_primitive(prim, s));
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline nlohmann::json gradcheck_report_json(const GradcheckReport& r, const GradcheckSettings& s) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& x : r.results) {
    prims.push_back({{"name", x.name},
                     {"passed", x.passed},
                     {"max_rel_error", std::isfinite(x.max_rel_error) ? nlohmann::json(x.max_rel_error) : nlohmann::json(nullptr)},
                     {"tolerance", x.tolerance},
                     {"worst_tensor", x.worst_tensor},
                     {"seeds", x.seeds},
                     {"kink_retries", x.retries}});
  }
  return {{"passed", r.passed()},
          {"step", s.step},
          {"seeds", s.seeds},
          {"wall_time_s", r.wall_time_s},
          {"primitives", prims}};
}

}  // namespace dcafuse
