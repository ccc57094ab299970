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

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dcafuse/dca.hpp"
#include "dcafuse/diffcore.hpp"
#include "dcafuse/geometry.hpp"

namespace dcafuse {

/// One-to-one fusion: each point reads the single pixel its calibration hits
/// on one pyramid level (stride 4 by default), averages over valid views and
/// concatenates the result with its LiDAR feature before an affine map.
struct OneToOneParams {
  AffineParams fuse;    // (C_lidar + C_img) -> C_out
  std::size_t level = 0;  // pyramid level index, 0 = stride 4

  static OneToOneParams init(std::size_t lidar_channels, std::size_t image_channels, std::size_t out_channels, Rng& rng,
                             std::size_t level = 0) {
    return OneToOneParams{AffineParams::glorot(out_channels, lidar_channels + image_channels, rng), level};
  }

  OneToOneParams zeros_like() const { return OneToOneParams{fuse.zeros_like(), level}; }

  template <class F>
  void for_each(F&& f) {
    fuse.for_each("fuse", f);
  }

  std::size_t out_channels() const { return fuse.out(); }
};

struct OneToOneOutput {
  PointFeatureSet fused;
  Tensor image_feature;  // N x C_img: view-averaged sample at p_ref
};

struct OneToOneGrads {
  Tensor lidar;
  OneToOneParams params;
};

class OneToOneFusion {
 public:
  explicit OneToOneFusion(const OneToOneParams& params) : params_(&params) {}

  OneToOneOutput forward(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids, const CameraRig& rig,
                         const ReferencePointSet& ref) {
    const OneToOneParams& p = *params_;
    r.validate();
    if (pyramids.size() != rig.size()) throw DimensionError("one pyramid per camera required");
    if (ref.cameras != rig.size() || ref.points != r.size()) throw DimensionError("reference points do not match input");
    for (std::size_t k = 0; k < rig.size(); ++k) pyramids[k].validate(rig.cameras[k], p.level + 1);
    const std::size_t c_lidar = r.features.dim(1);
    const std::size_t c_img = pyramids.front().levels[p.level].dim(2);
    for (const auto& pyr : pyramids) {
      if (pyr.levels[p.level].dim(2) != c_img) throw DimensionError("one-to-one: cameras disagree on channel count");
    }
    if (p.fuse.in() != c_lidar + c_img) {
      throw DimensionError("one-to-one: fuse expects " + std::to_string(p.fuse.in()) + " inputs, got " +
                           std::to_string(c_lidar) + " + " + std::to_string(c_img));
    }
    const std::size_t n_pts = r.size();
    OneToOneOutput out{PointFeatureSet{Tensor({n_pts, p.out_channels()}), r.coords}, Tensor({n_pts, c_img})};
    concat_ = Tensor({n_pts, c_lidar + c_img});
    std::vector<Real> s(c_img);
    for (std::size_t n = 0; n < n_pts; ++n) {
      auto img = out.image_feature.row(n);
      std::size_t n_valid = 0;
      for (std::size_t k = 0; k < rig.size(); ++k) {
        if (!ref.is_valid(k, n)) continue;
        bilinear_sample_into(pyramids[k].levels[p.level], ref.u(k, n), ref.v(k, n), s);
        for (std::size_t i = 0; i < c_img; ++i) img[i] += s[i];
        ++n_valid;
      }
      if (n_valid > 1) {
        for (auto& x : img) x /= static_cast<Real>(n_valid);
      }
      auto row = concat_->row(n);
      std::copy_n(r.features.row(n).begin(), c_lidar, row.begin());
      std::copy_n(img.begin(), c_img, row.begin() + static_cast<std::ptrdiff_t>(c_lidar));
      affine_apply(row, p.fuse, out.fused.features.row(n));
    }
    c_lidar_ = c_lidar;
    return out;
  }

  OneToOneOutput forward(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids, const CameraRig& rig) {
    return forward(r, pyramids, rig, project(rig, r.coords));
  }

  OneToOneGrads backward(const Tensor& grad_fused) const {
    if (!concat_) throw StateError("one-to-one backward called without a preceding forward");
    const OneToOneParams& p = *params_;
    const std::size_t n_pts = concat_->dim(0);
    grad_fused.require_shape({n_pts, p.out_channels()}, "one-to-one backward grad_fused");
    OneToOneGrads g{Tensor({n_pts, c_lidar_}), p.zeros_like()};
    std::vector<Real> gin(p.fuse.in());
    for (std::size_t n = 0; n < n_pts; ++n) {
      std::fill(gin.begin(), gin.end(), 0.0);
      affine_apply_backward(concat_->row(n), p.fuse, grad_fused.row(n), gin, &g.params.fuse);
      std::copy_n(gin.begin(), c_lidar_, g.lidar.row(n).begin());
    }
    return g;
  }

 private:
  const OneToOneParams* params_;
  std::optional<Tensor> concat_;
  std::size_t c_lidar_ = 0;
};

inline PointFeatureSet one_to_one_fuse(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids,
                                       const CameraRig& rig, const OneToOneParams& params) {
  OneToOneFusion op(params);
  return op.forward(r, pyramids, rig).fused;
}

/// Parameters of the degenerate DCA configuration that reproduces the
/// one-to-one image feature: L = M = D = 1, zero offsets, identity level
/// unifier (requires C_img == C).
inline DcaParams degenerate_dca_params(std::size_t channels, std::size_t image_channels, Rng& rng) {
  DcaHyper h;
  h.levels = 1;
  h.directions = 1;
  h.points_per_direction = 1;
  h.channels = channels;
  h.offset_init = OffsetInit::zero;
  DcaParams p = DcaParams::init(h, channels, {image_channels}, 32, 32, rng);
  if (image_channels != channels) throw DimensionError("degenerate mapping needs image channels == C");
  p.level_unify[0] = AffineParams::identity(channels);
  return p;
}

}  // namespace dcafuse
