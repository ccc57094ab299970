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

// Procedural multi-view scenes whose per-point labels can only be read off
// the images.
//
// A ring of pinhole cameras sits above a flat ground plane. The ground is
// tiled by a jittered 3D Voronoi class field; each camera renders the field
// at stride 4 as one-hot class channels plus two smooth geometry channels
// (ground range and azimuth) and Gaussian noise, and the higher pyramid levels
// are 2x mean pools. LiDAR points lie on the visible ground; their features are
// smooth functions of position only and carry no class information. Because
// range and azimuth are seen by both sensors, a misaligned projection is
// detectable from the pair of features at the reference point.

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcafuse/dca.hpp"
#include "dcafuse/geometry.hpp"
#include "dcafuse/jsonio.hpp"
#include "dcafuse/random.hpp"
#include "dcafuse/tensor.hpp"

namespace dcafuse {

class SceneGenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneConfig {
  std::size_t n_points = 512;
  std::size_t n_classes = 4;
  std::size_t n_cameras = 3;
  std::size_t image_px = 256;
  double texture_scale = 4.0;  // meters per Voronoi cell
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  std::size_t lidar_channels = 16;
  double lidar_noise_std = 0.05;
  double class_blur = 1.0;     // Gaussian sigma of the class channels, stride-4 pixels

  // Rig layout.
  double camera_height_m = 2.0;
  double camera_pitch_deg = 12.0;
  double yaw_step_deg = 45.0;
  double focal_scale = 1.0;  // focal length in units of image_px
  double min_range_m = 4.0;
  double max_range_m = 16.0;

  void validate() const {
    if (n_points == 0) throw std::invalid_argument("scene.n_points must be positive");
    if (n_classes == 0) throw std::invalid_argument("scene.n_classes must be positive");
    if (n_cameras == 0) throw std::invalid_argument("scene.n_cameras must be positive");
    if (image_px == 0 || image_px % 32 != 0) throw std::invalid_argument("scene.image_px must be a positive multiple of 32");
    if (!(texture_scale > 0.0)) throw std::invalid_argument("scene.texture_scale must be > 0");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("scene.noise_std must be >= 0");
    if (!(lidar_noise_std >= 0.0)) throw std::invalid_argument("scene.lidar_noise_std must be >= 0");
    if (!(class_blur >= 0.0)) throw std::invalid_argument("scene.class_blur must be >= 0");
    if (lidar_channels < 4) throw std::invalid_argument("scene.lidar_channels must be >= 4");
    if (!(camera_height_m > 0.0)) throw std::invalid_argument("scene.camera_height_m must be > 0");
    if (!(focal_scale > 0.0)) throw std::invalid_argument("scene.focal_scale must be > 0");
    if (!(min_range_m > 0.0 && max_range_m > min_range_m)) {
      throw std::invalid_argument("scene.max_range_m must exceed scene.min_range_m > 0");
    }
  }

  /// Channels of every pyramid level: one-hot classes plus two geometry channels.
  std::size_t image_channels() const { return n_classes + 2; }
};

struct LabeledScene {
  SceneConfig config;
  PointFeatureSet points;
  std::vector<int> labels;
  CameraRig rig;
  std::vector<FeaturePyramid> pyramids;
};

/// Four-level pyramid: level0 at stride 4, then three 2x2 mean pools.
inline FeaturePyramid pool_pyramid(const Tensor& level0) {
  if (level0.rank() != 3) throw DimensionError("pool_pyramid: expected H x W x C map");
  if (level0.dim(0) % 8 != 0 || level0.dim(1) % 8 != 0) {
    throw DimensionError("pool_pyramid: H and W must be divisible by 8, got " + detail::shape_str(level0.shape()));
  }
  FeaturePyramid pyr;
  pyr.levels.push_back(level0);
  for (int l = 1; l < 4; ++l) {
    const Tensor& prev = pyr.levels.back();
    const std::size_t h = prev.dim(0) / 2, w = prev.dim(1) / 2, c = prev.dim(2);
    Tensor next({h, w, c});
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          auto at = [&](std::size_t y, std::size_t x) { return prev[(y * prev.dim(1) + x) * c + ch]; };
          next[(i * w + j) * c + ch] =
              0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
        }
      }
    }
    pyr.levels.push_back(std::move(next));
  }
  return pyr;
}

/// Jittered Voronoi partition of R^3 with a class per site.
class ClassField {
 public:
  ClassField(std::uint64_t seed, double scale, std::size_t n_classes)
      : seed_(seed), scale_(scale), n_classes_(n_classes) {}

  int operator()(const Eigen::Vector3d& x) const {
    const Eigen::Vector3d g = x / scale_;
    const long ci = static_cast<long>(std::floor(g.x())), cj = static_cast<long>(std::floor(g.y())),
               ck = static_cast<long>(std::floor(g.z()));
    double best = INFINITY;
    std::uint64_t best_hash = 0;
    for (long di = -2; di <= 2; ++di) {
      for (long dj = -2; dj <= 2; ++dj) {
        for (long dk = -2; dk <= 2; ++dk) {
          const long i = ci + di, j = cj + dj, k = ck + dk;
          const std::uint64_t h = cell_hash(i, j, k);
          const Eigen::Vector3d site(static_cast<double>(i) + unit(h, 1), static_cast<double>(j) + unit(h, 2),
                                     static_cast<double>(k) + unit(h, 3));
          const double d = (site - g).squaredNorm();
          if (d < best) {
            best = d;
            best_hash = h;
          }
        }
      }
    }
    return static_cast<int>(mix64(best_hash ^ 0x5EEDULL) % n_classes_);
  }

 private:
  std::uint64_t cell_hash(long i, long j, long k) const {
    std::uint64_t h = mix64(seed_);
    h = mix64(h ^ static_cast<std::uint64_t>(i));
    h = mix64(h ^ static_cast<std::uint64_t>(j));
    h = mix64(h ^ static_cast<std::uint64_t>(k));
    return h;
  }
  static double unit(std::uint64_t h, std::uint64_t salt) {
    return static_cast<double>(mix64(h + salt) >> 11) * 0x1.0p-53;
  }

  std::uint64_t seed_;
  double scale_;
  std::size_t n_classes_;
};

namespace detail {

struct CameraPose {
  Eigen::Isometry3d world_to_cam;
  Eigen::Vector3d center;
};

// World: x forward, y left, z up. Camera: x right, y down, z along the optical axis.
inline CameraPose ring_camera(const SceneConfig& cfg, std::size_t k) {
  const double deg = std::numbers::pi / 180.0;
  const double yaw = (static_cast<double>(k) - 0.5 * static_cast<double>(cfg.n_cameras - 1)) * cfg.yaw_step_deg * deg;
  const double pitch = cfg.camera_pitch_deg * deg;
  const Eigen::Vector3d forward(std::cos(yaw) * std::cos(pitch), std::sin(yaw) * std::cos(pitch), -std::sin(pitch));
  const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right;
  r.row(1) = down;
  r.row(2) = forward;
  CameraPose pose;
  pose.center = Eigen::Vector3d(0.0, 0.0, cfg.camera_height_m);
  pose.world_to_cam = Eigen::Isometry3d::Identity();
  pose.world_to_cam.linear() = r;
  pose.world_to_cam.translation() = -r * pose.center;
  return pose;
}

inline double focal_px(const SceneConfig& cfg) { return cfg.focal_scale * static_cast<double>(cfg.image_px); }

/// LiDAR features: smooth, class-free functions of position.
inline void lidar_features(const SceneConfig& cfg, const Eigen::Vector3d& x, Rng& noise, std::span<Real> out) {
  const double range = std::hypot(x.x(), x.y());
  const double az = std::atan2(x.y(), x.x());
  out[0] = x.x() / cfg.max_range_m;
  out[1] = x.y() / cfg.max_range_m;
  out[2] = cfg.min_range_m / range;
  out[3] = az;
  for (std::size_t i = 4; i < out.size(); ++i) {
    // Fixed low-frequency bands (wavelengths >= 12 m).
    const double f = 2.0 * std::numbers::pi / (12.0 + 4.0 * static_cast<double>(i - 4));
    const double phase = 0.7 * static_cast<double>(i);
    out[i] = (i % 2 == 0) ? std::sin(f * x.x() + phase) : std::cos(f * x.y() + phase);
  }
  for (auto& v : out) v += cfg.lidar_noise_std * noise.normal();
}

}  // namespace detail

inline CameraRig scene_rig(const SceneConfig& cfg) {
  CameraRig rig;
  const double f = detail::focal_px(cfg), c = 0.5 * static_cast<double>(cfg.image_px);
  for (std::size_t k = 0; k < cfg.n_cameras; ++k) {
    const auto pose = detail::ring_camera(cfg, k);
    rig.cameras.push_back(Camera{pinhole(f, c, c, pose.world_to_cam), cfg.image_px, cfg.image_px});
  }
  return rig;
}

/// Stride-4 render of one camera without noise, averaged over 4x4 pixel
/// supersamples: class one-hot channels, then two class-free geometry
/// channels anchored to the world (min_range / ground range and azimuth of
/// the ray's ground hit). Rays that miss the ground contribute nothing.
inline Tensor render_level0(const SceneConfig& cfg, const ClassField& field, std::size_t k) {
  const auto pose = detail::ring_camera(cfg, k);
  const std::size_t s = kStrides[0], side = cfg.image_px / s, ch = cfg.image_channels();
  const double f = detail::focal_px(cfg), c = 0.5 * static_cast<double>(cfg.image_px);
  const Eigen::Matrix3d cam_to_world = pose.world_to_cam.linear().transpose();
  Tensor map({side, side, ch});
  const double inv_ss = 1.0 / static_cast<double>(s * s);
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      Real* cell = &map[(i * side + j) * ch];
      for (std::size_t a = 0; a < s; ++a) {
        for (std::size_t b = 0; b < s; ++b) {
          const double px = static_cast<double>(j * s + b) + 0.5, py = static_cast<double>(i * s + a) + 0.5;
          const Eigen::Vector3d dir = cam_to_world * Eigen::Vector3d((px - c) / f, (py - c) / f, 1.0);
          if (dir.z() >= -1e-9) continue;
          const double t = -pose.center.z() / dir.z();
          const Eigen::Vector3d hit = pose.center + t * dir;
          const double range = std::hypot(hit.x(), hit.y());
          if (range > 2.0 * cfg.max_range_m) continue;
          cell[field(hit)] += inv_ss;
          cell[cfg.n_classes] += inv_ss * cfg.min_range_m / range;
          cell[cfg.n_classes + 1] += inv_ss * std::atan2(hit.y(), hit.x());
        }
      }
    }
  }
  return map;
}

/// Separable Gaussian blur of the first `channels` channels, border-clamped.
inline void blur_channels(Tensor& map, std::size_t channels, double sigma) {
  if (!(sigma > 0.0)) return;
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    total += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  }
  for (auto& k : kernel) k /= total;
  const long h = static_cast<long>(map.dim(0)), w = static_cast<long>(map.dim(1));
  const std::size_t ch = map.dim(2);
  for (int axis = 0; axis < 2; ++axis) {
    Tensor src = map;
    for (long i = 0; i < h; ++i) {
      for (long j = 0; j < w; ++j) {
        for (std::size_t c = 0; c < channels; ++c) {
          double acc = 0.0;
          for (long t = -radius; t <= radius; ++t) {
            const long ii = axis == 0 ? std::clamp(i + t, 0L, h - 1) : i;
            const long jj = axis == 1 ? std::clamp(j + t, 0L, w - 1) : j;
            acc += kernel[static_cast<std::size_t>(t + radius)] * src[static_cast<std::size_t>(ii * w + jj) * ch + c];
          }
          map[static_cast<std::size_t>(i * w + j) * ch + c] = acc;
        }
      }
    }
  }
}

/// Index of the largest of the first n_classes channels of the view-averaged
/// sample at the reference points; -1 when no view is valid or the maximum is tied.
inline int class_readout(const std::vector<FeaturePyramid>& pyramids, const ReferencePointSet& ref, std::size_t n,
                         std::size_t n_classes, std::size_t level = 0) {
  std::vector<Real> acc(n_classes, 0.0);
  std::size_t n_valid = 0;
  for (std::size_t k = 0; k < ref.cameras; ++k) {
    if (!ref.is_valid(k, n)) continue;
    const auto s = bilinear_sample(pyramids[k].levels[level], ref.u(k, n), ref.v(k, n));
    for (std::size_t c = 0; c < n_classes; ++c) acc[c] += s[c];
    ++n_valid;
  }
  if (n_valid == 0) return -1;
  int best = 0;
  bool tie = false;
  for (std::size_t c = 1; c < n_classes; ++c) {
    if (acc[c] > acc[best]) {
      best = static_cast<int>(c);
      tie = false;
    } else if (acc[c] == acc[best]) {
      tie = true;
    }
  }
  return tie ? -1 : best;
}

inline LabeledScene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  LabeledScene scene;
  scene.config = cfg;
  scene.rig = scene_rig(cfg);
  const ClassField field(derive_seed(cfg.seed, "scene/field"), cfg.texture_scale, cfg.n_classes);

  std::vector<FeaturePyramid> clean;
  Rng noise_rng(derive_seed(cfg.seed, "scene/image-noise"));
  for (std::size_t k = 0; k < cfg.n_cameras; ++k) {
    Tensor level0 = render_level0(cfg, field, k);
    blur_channels(level0, cfg.n_classes, cfg.class_blur);
    clean.push_back(pool_pyramid(level0));
    if (cfg.noise_std > 0.0) {
      for (auto& v : level0.vec()) v += cfg.noise_std * noise_rng.normal();
    }
    scene.pyramids.push_back(pool_pyramid(level0));
  }

  // Points: uniform on the ground within the rig's yaw span and range band,
  // kept only if visible and if the clean stride-4 render reads back their label.
  const double deg = std::numbers::pi / 180.0;
  const double half_span = (0.5 * static_cast<double>(cfg.n_cameras - 1) * cfg.yaw_step_deg + 40.0) * deg;
  const std::size_t max_attempts = 200 * cfg.n_points + 1000;
  Rng pos_rng(derive_seed(cfg.seed, "scene/points"));
  Rng feat_rng(derive_seed(cfg.seed, "scene/lidar-noise"));
  scene.points = PointFeatureSet{Tensor({cfg.n_points, cfg.lidar_channels}), Tensor({cfg.n_points, 3})};
  scene.labels.reserve(cfg.n_points);
  std::size_t accepted = 0, attempts = 0;
  Tensor probe({1, 3});
  const double r2_min = cfg.min_range_m * cfg.min_range_m, r2_max = cfg.max_range_m * cfg.max_range_m;
  while (accepted < cfg.n_points) {
    if (++attempts > max_attempts) {
      throw SceneGenerationError("scene generation: placed only " + std::to_string(accepted) + " of " +
                                 std::to_string(cfg.n_points) + " points after " + std::to_string(max_attempts) +
                                 " attempts");
    }
    // Uniform by area in the annular sector.
    const double r = std::sqrt(pos_rng.uniform(r2_min, r2_max));
    const double az = pos_rng.uniform(-half_span, half_span);
    const Eigen::Vector3d x(r * std::cos(az), r * std::sin(az), 0.0);
    probe.at(0, 0) = x.x();
    probe.at(0, 1) = x.y();
    probe.at(0, 2) = x.z();
    const ReferencePointSet ref = project(scene.rig, probe);
    const int label = field(x);
    if (class_readout(clean, ref, 0, cfg.n_classes) != label) continue;
    for (int j = 0; j < 3; ++j) scene.points.coords.at(accepted, j) = x[j];
    detail::lidar_features(cfg, x, feat_rng, scene.points.features.row(accepted));
    scene.labels.push_back(label);
    ++accepted;
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Scene directories: manifest.json, rig.json, points_features / points_coords /
// labels tensors and one tensor per (camera, level) map.

inline nlohmann::json scene_config_to_json(const SceneConfig& c) {
  return {{"n_points", c.n_points},
          {"n_classes", c.n_classes},
          {"n_cameras", c.n_cameras},
          {"image_px", c.image_px},
          {"texture_scale", c.texture_scale},
          {"noise_std", c.noise_std},
          {"seed", c.seed},
          {"lidar_channels", c.lidar_channels},
          {"lidar_noise_std", c.lidar_noise_std},
          {"class_blur", c.class_blur},
          {"camera_height_m", c.camera_height_m},
          {"camera_pitch_deg", c.camera_pitch_deg},
          {"yaw_step_deg", c.yaw_step_deg},
          {"focal_scale", c.focal_scale},
          {"min_range_m", c.min_range_m},
          {"max_range_m", c.max_range_m}};
}

/// Overrides the fields of `c` present in `j`; unknown keys are an error.
inline SceneConfig scene_config_from_json(const nlohmann::json& j, SceneConfig c = {}, const std::string& path = "scene") {
  JsonFields f(j, path);
  f.read("n_points", c.n_points);
  f.read("n_classes", c.n_classes);
  f.read("n_cameras", c.n_cameras);
  f.read("image_px", c.image_px);
  f.read("texture_scale", c.texture_scale);
  f.read("noise_std", c.noise_std);
  f.read("seed", c.seed);
  f.read("lidar_channels", c.lidar_channels);
  f.read("lidar_noise_std", c.lidar_noise_std);
  f.read("class_blur", c.class_blur);
  f.read("camera_height_m", c.camera_height_m);
  f.read("camera_pitch_deg", c.camera_pitch_deg);
  f.read("yaw_step_deg", c.yaw_step_deg);
  f.read("focal_scale", c.focal_scale);
  f.read("min_range_m", c.min_range_m);
  f.read("max_range_m", c.max_range_m);
  f.finish();
  validate_as_config(path, [&] { c.validate(); });
  return c;
}

inline void save_scene(const LabeledScene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "rig.json");
    os << rig_to_json(scene.rig).dump(2) << '\n';
  }
  save_tensor(dir / "points_features.tensor", scene.points.features);
  save_tensor(dir / "points_coords.tensor", scene.points.coords);
  Tensor labels({scene.labels.size()});
  for (std::size_t i = 0; i < scene.labels.size(); ++i) labels[i] = scene.labels[i];
  save_tensor(dir / "labels.tensor", labels);
  nlohmann::json maps = nlohmann::json::array();
  for (std::size_t k = 0; k < scene.pyramids.size(); ++k) {
    for (std::size_t l = 0; l < scene.pyramids[k].size(); ++l) {
      const std::string file = "map_cam" + std::to_string(k) + "_level" + std::to_string(l) + ".tensor";
      save_tensor(dir / file, scene.pyramids[k].levels[l]);
      maps.push_back({{"camera", k}, {"level", l}, {"stride", kStrides[l]},
                      {"shape", scene.pyramids[k].levels[l].shape()}, {"file", file}});
    }
  }
  nlohmann::json manifest;
  manifest["format"] = "dcafuse-scene";
  manifest["version"] = 1;
  manifest["config"] = scene_config_to_json(scene.config);
  manifest["rig"] = "rig.json";
  manifest["points"] = {{"features", "points_features.tensor"}, {"coords", "points_coords.tensor"},
                        {"labels", "labels.tensor"}, {"count", scene.labels.size()}};
  manifest["maps"] = maps;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

inline LabeledScene load_scene(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("scene: missing manifest.json in " + dir.string());
  const nlohmann::json m = nlohmann::json::parse(is);
  if (m.value("format", "") != "dcafuse-scene") throw FormatError("scene: unexpected manifest format");
  LabeledScene scene;
  scene.config = scene_config_from_json(m.at("config"));
  {
    std::ifstream rs(dir / m.at("rig").get<std::string>());
    scene.rig = rig_from_json(nlohmann::json::parse(rs));
  }
  const auto& pts = m.at("points");
  scene.points.features = load_tensor(dir / pts.at("features").get<std::string>());
  scene.points.coords = load_tensor(dir / pts.at("coords").get<std::string>());
  const Tensor labels = load_tensor(dir / pts.at("labels").get<std::string>());
  for (std::size_t i = 0; i < labels.size(); ++i) scene.labels.push_back(static_cast<int>(std::lround(labels[i])));
  scene.pyramids.resize(scene.rig.size());
  for (const auto& e : m.at("maps")) {
    const std::size_t k = e.at("camera"), l = e.at("level");
    if (k >= scene.pyramids.size()) throw FormatError("scene: map camera index out of range");
    auto& levels = scene.pyramids[k].levels;
    if (levels.size() <= l) levels.resize(l + 1);
    levels[l] = load_tensor(dir / e.at("file").get<std::string>());
  }
  return scene;
}

}  // namespace dcafuse
