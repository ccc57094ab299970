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

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcafuse/random.hpp"
#include "dcafuse/tensor.hpp"

namespace dcafuse {

using Mat34 = Eigen::Matrix<double, 3, 4, Eigen::RowMajor>;

/// Points closer than this (camera-frame depth, meters) are treated as behind the camera.
inline constexpr Real kMinDepth = 1e-3;

/// Pyramid strides; image sizes must be multiples of the largest.
inline constexpr std::size_t kStrides[4] = {4, 8, 16, 32};

struct Camera {
  Mat34 proj = Mat34::Zero();  // homogeneous 3D (meters) -> homogeneous 2D (pixels)
  std::size_t width_px = 0;
  std::size_t height_px = 0;
};

struct CameraRig {
  std::vector<Camera> cameras;

  std::size_t size() const { return cameras.size(); }

  void validate() const {
    if (cameras.empty()) throw std::invalid_argument("camera rig: at least one camera required");
    for (std::size_t k = 0; k < cameras.size(); ++k) {
      const auto& c = cameras[k];
      const std::string where = "camera rig: camera " + std::to_string(k);
      if (c.width_px == 0 || c.height_px == 0 || c.width_px % 32 != 0 || c.height_px % 32 != 0) {
        throw std::invalid_argument(where + ": width_px and height_px must be positive multiples of 32");
      }
      if (!c.proj.allFinite()) throw std::invalid_argument(where + ": projection has non-finite entries");
    }
  }
};

/// Per-camera normalized projections of N points.
struct ReferencePointSet {
  std::size_t cameras = 0;
  std::size_t points = 0;
  std::vector<Real> coords;  // K x N x 2, normalized to [0,1]^2 where valid
  std::vector<unsigned char> valid;  // K x N
  std::vector<Real> depth;  // K x N

  Real u(std::size_t k, std::size_t n) const { return coords[(k * points + n) * 2]; }
  Real v(std::size_t k, std::size_t n) const { return coords[(k * points + n) * 2 + 1]; }
  bool is_valid(std::size_t k, std::size_t n) const { return valid[k * points + n] != 0; }

  /// Keep only the listed points, in the given order.
  ReferencePointSet select(std::span<const std::size_t> idx) const {
    ReferencePointSet out;
    out.cameras = cameras;
    out.points = idx.size();
    out.coords.resize(cameras * idx.size() * 2);
    out.valid.resize(cameras * idx.size());
    out.depth.resize(cameras * idx.size());
    for (std::size_t k = 0; k < cameras; ++k) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t src = k * points + idx[i], dst = k * idx.size() + i;
        out.coords[2 * dst] = coords[2 * src];
        out.coords[2 * dst + 1] = coords[2 * src + 1];
        out.valid[dst] = valid[src];
        out.depth[dst] = depth[src];
      }
    }
    return out;
  }
};

struct DisturbanceConfig {
  double probability = 0.5;
  double max_rot_deg = 2.0;
  double max_trans_m = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(probability >= 0.0 && probability <= 1.0)) throw std::invalid_argument("disturbance.probability must lie in [0, 1]");
    if (!(max_rot_deg >= 0.0)) throw std::invalid_argument("disturbance.max_rot_deg must be >= 0");
    if (!(max_trans_m >= 0.0)) throw std::invalid_argument("disturbance.max_trans_m must be >= 0");
  }
};

/// Rows (x, y, z, 1).
inline Tensor to_homogeneous(const Tensor& points) {
  if (points.rank() != 2 || points.dim(1) != 3) throw DimensionError("to_homogeneous: expected N x 3 points");
  Tensor out({points.dim(0), 4});
  for (std::size_t n = 0; n < points.dim(0); ++n) {
    for (std::size_t j = 0; j < 3; ++j) out.at(n, j) = points.at(n, j);
    out.at(n, 3) = 1.0;
  }
  return out;
}

/// Projects N x 3 points into every camera. Points behind the near plane or
/// outside the closed unit square are masked, never raised; masked entries
/// carry coords (0, 0).
inline ReferencePointSet project(const CameraRig& rig, const Tensor& points) {
  if (points.rank() != 2 || points.dim(1) != 3) throw DimensionError("project: expected N x 3 points");
  const std::size_t n_pts = points.dim(0);
  ReferencePointSet ref;
  ref.cameras = rig.size();
  ref.points = n_pts;
  ref.coords.assign(rig.size() * n_pts * 2, 0.0);
  ref.valid.assign(rig.size() * n_pts, 0);
  ref.depth.assign(rig.size() * n_pts, 0.0);
  const Tensor homo = to_homogeneous(points);
  for (std::size_t k = 0; k < rig.size(); ++k) {
    const Camera& cam = rig.cameras[k];
    for (std::size_t n = 0; n < n_pts; ++n) {
      const Eigen::Map<const Eigen::Vector4d> p(homo.row(n).data());
      const Eigen::Vector3d uvw = cam.proj * p;
      const std::size_t idx = k * n_pts + n;
      ref.depth[idx] = uvw.z();
      if (!(uvw.z() > kMinDepth)) continue;
      const Real u = uvw.x() / uvw.z() / static_cast<Real>(cam.width_px);
      const Real v = uvw.y() / uvw.z() / static_cast<Real>(cam.height_px);
      if (u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0) {
        ref.coords[2 * idx] = u;
        ref.coords[2 * idx + 1] = v;
        ref.valid[idx] = 1;
      }
    }
  }
  return ref;
}

/// Upper-triangular intrinsics of P = K [R | t], positive diagonal.
inline Eigen::Matrix3d intrinsics_of(const Mat34& proj) {
  const Eigen::Matrix3d m = proj.leftCols<3>();
  Eigen::Matrix3d k = Eigen::Matrix3d::Zero();
  const Eigen::Vector3d m1 = m.row(0), m2 = m.row(1), m3 = m.row(2);
  k(2, 2) = m3.norm();
  const Eigen::Vector3d r3 = m3 / k(2, 2);
  k(1, 2) = m2.dot(r3);
  Eigen::Vector3d t2 = m2 - k(1, 2) * r3;
  k(1, 1) = t2.norm();
  const Eigen::Vector3d r2 = t2 / k(1, 1);
  k(0, 2) = m1.dot(r3);
  k(0, 1) = m1.dot(r2);
  k(0, 0) = (m1 - k(0, 2) * r3 - k(0, 1) * r2).norm();
  return k;
}

/// Rigid camera-frame perturbation x' = rotation * x + translation.
struct Perturbation {
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  double angle_rad = 0.0;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Matrix3d rotation() const { return Eigen::AngleAxisd(angle_rad, axis).toRotationMatrix(); }
};

/// Axis uniform on the sphere, angle uniform in [-max_rot, max_rot], translation
/// uniform in the cube [-max_trans, max_trans]^3.
inline Perturbation sample_perturbation(const DisturbanceConfig& cfg, Rng& rng) {
  Perturbation p;
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  p.axis = Eigen::Vector3d(s * std::cos(phi), s * std::sin(phi), z);
  p.angle_rad = rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg) * std::numbers::pi / 180.0;
  for (int i = 0; i < 3; ++i) p.translation[i] = rng.uniform(-cfg.max_trans_m, cfg.max_trans_m);
  return p;
}

/// P = K [R | t]  ->  K [dR R | dR t + dt]. Intrinsics are left untouched.
inline Mat34 apply_perturbation(const Mat34& proj, const Perturbation& p) {
  const Eigen::Matrix3d k = intrinsics_of(proj);
  const Eigen::Matrix3d k_inv = k.inverse();
  const Eigen::Matrix3d a = k * p.rotation() * k_inv;
  Mat34 out = a * proj;
  out.col(3) += k * p.translation;
  return out;
}

/// Each camera is perturbed independently with probability cfg.probability.
/// Cameras that are not perturbed are copied bit for bit.
inline CameraRig disturb_calibration(const CameraRig& rig, const DisturbanceConfig& cfg, Rng& rng) {
  cfg.validate();
  CameraRig out = rig;
  for (auto& cam : out.cameras) {
    const bool hit = rng.uniform() < cfg.probability;
    const Perturbation p = sample_perturbation(cfg, rng);
    if (hit) cam.proj = apply_perturbation(cam.proj, p);
  }
  return out;
}

inline CameraRig disturb_calibration(const CameraRig& rig, const DisturbanceConfig& cfg) {
  Rng rng(cfg.seed);
  return disturb_calibration(rig, cfg, rng);
}

// ---------------------------------------------------------------------------
// Pinhole helpers

/// Camera looking along +z of its own frame; `world_to_cam` maps world points
/// into that frame.
inline Mat34 pinhole(double focal_px, double cx, double cy, const Eigen::Isometry3d& world_to_cam) {
  Eigen::Matrix3d k;
  k << focal_px, 0.0, cx, 0.0, focal_px, cy, 0.0, 0.0, 1.0;
  Eigen::Matrix<double, 3, 4> rt;
  rt.leftCols<3>() = world_to_cam.linear();
  rt.col(3) = world_to_cam.translation();
  return k * rt;
}

// ---------------------------------------------------------------------------
// JSON: {"cameras":[{"proj":[[4],[4],[4]],"width_px":W,"height_px":H}]}

inline nlohmann::json rig_to_json(const CameraRig& rig) {
  nlohmann::json j;
  j["cameras"] = nlohmann::json::array();
  for (const auto& c : rig.cameras) {
    nlohmann::json cj;
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) rows.push_back({c.proj(r, 0), c.proj(r, 1), c.proj(r, 2), c.proj(r, 3)});
    cj["proj"] = rows;
    cj["width_px"] = c.width_px;
    cj["height_px"] = c.height_px;
    j["cameras"].push_back(cj);
  }
  return j;
}

inline CameraRig rig_from_json(const nlohmann::json& j) {
  if (!j.contains("cameras") || !j["cameras"].is_array()) throw FormatError("rig JSON: missing \"cameras\" array");
  CameraRig rig;
  for (const auto& cj : j["cameras"]) {
    Camera c;
    const auto& proj = cj.at("proj");
    // Accept both the 3x4 nested form and a flat row-major list of 12.
    if (proj.size() == 3 && proj[0].is_array()) {
      for (int r = 0; r < 3; ++r) {
        if (proj[r].size() != 4) throw FormatError("rig JSON: proj rows must have 4 entries");
        for (int col = 0; col < 4; ++col) c.proj(r, col) = proj[r][col].get<double>();
      }
    } else if (proj.size() == 12) {
      for (int i = 0; i < 12; ++i) c.proj(i / 4, i % 4) = proj[i].get<double>();
    } else {
      throw FormatError("rig JSON: proj must be 3x4");
    }
    c.width_px = cj.at("width_px").get<std::size_t>();
    c.height_px = cj.at("height_px").get<std::size_t>();
    rig.cameras.push_back(c);
  }
  rig.validate();
  return rig;
}

}  // namespace dcafuse
