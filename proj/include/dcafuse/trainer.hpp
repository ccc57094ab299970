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

// Per-point classification on synthetic scenes: fusion operator + linear
// head, cross-entropy, single-optimizer training and evaluation under
// optional calibration disturbance.

#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcafuse/baseline.hpp"
#include "dcafuse/dca.hpp"
#include "dcafuse/optim.hpp"
#include "dcafuse/random.hpp"
#include "dcafuse/synthscene.hpp"

namespace dcafuse {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

enum class FusionKind { one_to_one, dca_no_dqe, dca_with_dqe };
enum class OptimizerKind { adamw, sgd };

inline const char* to_string(FusionKind k) {
  switch (k) {
    case FusionKind::one_to_one: return "one_to_one";
    case FusionKind::dca_no_dqe: return "dca_no_dqe";
    case FusionKind::dca_with_dqe: return "dca_with_dqe";
  }
  return "?";
}

inline FusionKind fusion_kind_from_string(const std::string& s) {
  if (s == "one_to_one") return FusionKind::one_to_one;
  if (s == "dca_no_dqe") return FusionKind::dca_no_dqe;
  if (s == "dca_with_dqe") return FusionKind::dca_with_dqe;
  throw std::invalid_argument("unknown fusion kind '" + s + "'");
}

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_points = 64;
  Real lr = 1e-4;
  Real weight_decay = 0.01;
  OptimizerKind optimizer = OptimizerKind::adamw;
  Real sgd_momentum = 0.9;
  std::optional<DisturbanceConfig> train_disturbance;
  std::uint64_t seed = 0;
  DcaHyper dca;                 // operator shape for the DCA kinds
  std::size_t baseline_level = 0;  // pyramid level read by one_to_one
  bool learn_offsets = true;       // false freezes the DCA offset head at its init
  Real offset_lr_scale = 0.1;      // learning-rate multiplier for the offset head

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("train.epochs must be positive");
    if (batch_points == 0) throw std::invalid_argument("train.batch_points must be positive");
    if (!(lr >= 0.0)) throw std::invalid_argument("train.lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be >= 0");
    if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw std::invalid_argument("train.sgd_momentum must be in [0, 1)");
    if (!(offset_lr_scale >= 0.0)) throw std::invalid_argument("train.offset_lr_scale must be >= 0");
    if (baseline_level > 3) throw std::invalid_argument("train.baseline_level must be in 0..3");
    if (train_disturbance) train_disturbance->validate();
    dca.validate();
  }
};

/// Cross-entropy of softmax(logits) against integer labels, averaged over rows.
struct CrossEntropy {
  Real loss = 0.0;
  Tensor grad;  // N x classes, (softmax - onehot) / N
};

inline CrossEntropy cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw DimensionError("cross_entropy: one label per row required");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  CrossEntropy ce{0.0, logits.zeros_like()};
  std::vector<Real> p(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
    const auto row = logits.row(i);
    const Real mx = *std::max_element(row.begin(), row.end());
    Real z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    const Real log_z = mx + std::log(z);
    ce.loss += log_z - row[static_cast<std::size_t>(y)];
    auto g = ce.grad.row(i);
    for (std::size_t c = 0; c < k; ++c) g[c] = std::exp(row[c] - log_z) / static_cast<Real>(n);
    g[static_cast<std::size_t>(y)] -= 1.0 / static_cast<Real>(n);
  }
  ce.loss /= static_cast<Real>(n);
  return ce;
}

/// Fusion operator followed by a linear classification head.
struct FusionModel {
  FusionKind kind = FusionKind::dca_with_dqe;
  DcaParams dca;         // used by the DCA kinds
  OneToOneParams o2o;    // used by one_to_one
  AffineParams head;     // C -> n_classes

  static FusionModel init(FusionKind kind, const TrainConfig& cfg, const SceneConfig& scene, std::uint64_t seed) {
    Rng rng(seed);
    FusionModel m;
    m.kind = kind;
    const std::size_t c = cfg.dca.channels;
    if (scene.lidar_channels != c) {
      throw DimensionError("scene LiDAR width " + std::to_string(scene.lidar_channels) + " must equal dca.channels " +
                           std::to_string(c));
    }
    const std::vector<std::size_t> level_channels(4, scene.image_channels());
    if (kind == FusionKind::one_to_one) {
      m.o2o = OneToOneParams::init(c, scene.image_channels(), c, rng, cfg.baseline_level);
    } else {
      DcaHyper h = cfg.dca;
      h.query = kind == FusionKind::dca_no_dqe ? QueryMode::lidar : h.query;
      m.dca = DcaParams::init(h, c, level_channels, scene.image_px, scene.image_px, rng);
    }
    m.head = AffineParams::glorot(scene.n_classes, c, rng);
    return m;
  }

  FusionModel zeros_like() const {
    FusionModel g;
    g.kind = kind;
    if (kind == FusionKind::one_to_one) {
      g.o2o = o2o.zeros_like();
    } else {
      g.dca = dca.zeros_like();
    }
    g.head = head.zeros_like();
    return g;
  }

  template <class F>
  void for_each(F&& f) {
    if (kind == FusionKind::one_to_one) {
      o2o.for_each(f);
    } else {
      dca.for_each(f);
    }
    head.for_each("head", f);
  }

  /// Tensors in visiting order, split into the DCA offset head and the rest.
  std::vector<Tensor*> tensors(bool offset_head) {
    std::vector<Tensor*> out;
    for_each([&](const std::string& name, Tensor& t) {
      if (name.starts_with("offset_head") == offset_head) out.push_back(&t);
    });
    return out;
  }
};

/// One forward/backward pass through a FusionModel.
class ModelPass {
 public:
  explicit ModelPass(const FusionModel& m) : model_(&m), dca_(m.dca), o2o_(m.o2o) {}

  Tensor forward(const PointFeatureSet& r, const std::vector<FeaturePyramid>& pyramids, const CameraRig& rig,
                 const ReferencePointSet& ref) {
    fused_ = model_->kind == FusionKind::one_to_one ? o2o_.forward(r, pyramids, rig, ref).fused.features
                                                    : dca_.forward(r, pyramids, rig, ref).fused.features;
    return affine_forward(fused_, model_->head);
  }

  FusionModel backward(const Tensor& grad_logits) const {
    FusionModel g = model_->zeros_like();
    const AffineGrads hg = affine_backward(fused_, model_->head, grad_logits);
    g.head = hg.params;
    if (model_->kind == FusionKind::one_to_one) {
      g.o2o = o2o_.backward(hg.x).params;
    } else {
      g.dca = dca_.backward(hg.x, /*with_map_grads=*/false).params;
    }
    return g;
  }

 private:
  const FusionModel* model_;
  DynamicCrossAttention dca_;
  OneToOneFusion o2o_;
  Tensor fused_;
};

struct TrainHistory {
  std::vector<Real> loss;      // mean batch loss per epoch
  std::vector<Real> accuracy;  // running training accuracy per epoch
};

struct TrainedModel {
  FusionModel model;
  TrainHistory history;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto row = logits.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline void validate_scenes(const std::vector<LabeledScene>& scenes) {
  if (scenes.empty()) throw std::invalid_argument("at least one scene required");
  for (const auto& s : scenes) {
    if (s.config.n_classes != scenes.front().config.n_classes ||
        s.config.image_channels() != scenes.front().config.image_channels() ||
        s.config.lidar_channels != scenes.front().config.lidar_channels) {
      throw DimensionError("scenes disagree on class or channel counts");
    }
  }
}

/// Trains `kind` on `scenes`. With a training disturbance, every scene's rig
/// is re-disturbed each epoch from the stream "train/disturb/<scene>/<epoch>".
inline TrainedModel train_model(FusionKind kind, const std::vector<LabeledScene>& scenes, const TrainConfig& cfg) {
  cfg.validate();
  validate_scenes(scenes);
  TrainedModel out{FusionModel::init(kind, cfg, scenes.front().config, derive_seed(cfg.seed, "train/init")), {}};
  FusionModel& model = out.model;
  const std::vector<Tensor*> params[2] = {model.tensors(false), model.tensors(true)};
  const Real group_lr[2] = {cfg.lr, cfg.learn_offsets ? cfg.lr * cfg.offset_lr_scale : 0.0};
  AdamState adam[2];
  SgdState sgd[2];
  Rng order_rng(derive_seed(cfg.seed, "train/order"));

  std::vector<std::size_t> scene_order(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) scene_order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(scene_order);
    Real loss_sum = 0.0;
    std::size_t batches = 0, correct = 0, seen = 0;
    for (std::size_t si : scene_order) {
      const LabeledScene& scene = scenes[si];
      CameraRig rig = scene.rig;
      if (cfg.train_disturbance) {
        DisturbanceConfig dc = *cfg.train_disturbance;
        dc.seed = derive_seed(dc.seed ^ cfg.seed,
                              "train/disturb/" + std::to_string(si) + "/" + std::to_string(epoch));
        rig = disturb_calibration(scene.rig, dc);
      }
      const ReferencePointSet ref = project(rig, scene.points.coords);
      std::vector<std::size_t> idx(scene.points.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      order_rng.shuffle(idx);
      for (std::size_t start = 0; start < idx.size(); start += cfg.batch_points) {
        const std::size_t stop = std::min(idx.size(), start + cfg.batch_points);
        const std::span<const std::size_t> b(idx.data() + start, stop - start);
        const PointFeatureSet r = scene.points.select(b);
        const ReferencePointSet ref_b = ref.select(b);
        std::vector<int> labels(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) labels[i] = scene.labels[b[i]];

        ModelPass pass(model);
        const Tensor logits = pass.forward(r, scene.pyramids, rig, ref_b);
        const CrossEntropy ce = cross_entropy_loss(logits, labels);
        if (!std::isfinite(ce.loss)) {
          throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch), epoch);
        }
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < b.size(); ++i) correct += pred[i] == labels[i];
        seen += b.size();
        loss_sum += ce.loss;
        ++batches;

        FusionModel grads = pass.backward(ce.grad);
        for (int grp = 0; grp < 2; ++grp) {
          if (params[grp].empty() || group_lr[grp] == 0.0) continue;
          const std::vector<Tensor*> gp = grads.tensors(grp == 1);
          const std::vector<const Tensor*> g(gp.begin(), gp.end());
          if (cfg.optimizer == OptimizerKind::adamw) {
            adamw_step(params[grp], g, adam[grp], group_lr[grp], cfg.weight_decay);
          } else {
            sgd_step(params[grp], g, sgd[grp], group_lr[grp], cfg.sgd_momentum, cfg.weight_decay);
          }
        }
      }
    }
    out.history.loss.push_back(loss_sum / static_cast<Real>(batches));
    out.history.accuracy.push_back(static_cast<Real>(correct) / static_cast<Real>(seen));
  }
  return out;
}

/// Predicted labels for every point of `scene` under calibration `rig`.
inline std::vector<int> predict(const FusionModel& model, const LabeledScene& scene, const CameraRig& rig) {
  ModelPass pass(model);
  const ReferencePointSet ref = project(rig, scene.points.coords);
  return argmax_rows(pass.forward(scene.points, scene.pyramids, rig, ref));
}

struct ExperimentReport {
  Real accuracy = 0.0;            // under the evaluated condition
  Real clean_accuracy = 0.0;      // same model, undisturbed calibration
  Real loss_of_disturbance = 0.0; // clean_accuracy - accuracy (0 when undisturbed)
  std::vector<Real> per_class_accuracy;
  Real wall_time_s = 0.0;
};

/// Accuracy over `scenes`. With a disturbance, scene i is evaluated under a rig
/// drawn from "eval/disturb/<i>" so every scene gets its own draw.
inline ExperimentReport evaluate(const FusionModel& model, const std::vector<LabeledScene>& scenes,
                                 const std::optional<DisturbanceConfig>& eval_disturbance) {
  validate_scenes(scenes);
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n_classes = scenes.front().config.n_classes;
  std::vector<std::size_t> hits(n_classes, 0), totals(n_classes, 0);
  std::size_t correct = 0, clean_correct = 0, total = 0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const LabeledScene& scene = scenes[si];
    const auto clean = predict(model, scene, scene.rig);
    std::vector<int> pred = clean;
    if (eval_disturbance) {
      DisturbanceConfig dc = *eval_disturbance;
      dc.seed = derive_seed(dc.seed, "eval/disturb/" + std::to_string(si));
      pred = predict(model, scene, disturb_calibration(scene.rig, dc));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int y = scene.labels[i];
      ++totals[static_cast<std::size_t>(y)];
      if (pred[i] == y) {
        ++correct;
        ++hits[static_cast<std::size_t>(y)];
      }
      clean_correct += clean[i] == y;
    }
    total += pred.size();
  }
  ExperimentReport rep;
  rep.accuracy = static_cast<Real>(correct) / static_cast<Real>(total);
  rep.clean_accuracy = static_cast<Real>(clean_correct) / static_cast<Real>(total);
  rep.loss_of_disturbance = rep.clean_accuracy - rep.accuracy;
  for (std::size_t c = 0; c < n_classes; ++c) {
    rep.per_class_accuracy.push_back(totals[c] ? static_cast<Real>(hits[c]) / static_cast<Real>(totals[c]) : 0.0);
  }
  rep.wall_time_s = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace dcafuse
