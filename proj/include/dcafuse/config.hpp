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

// Run configuration: one JSON document per run.
//
//   {
//     "command": "gradcheck" | "train" | "robustness" | "genscene",
//     "seed": u64, "threads": n,
//     "scene":       { SceneConfig fields except seed },
//     "dca":         { levels, directions, points_per_direction, channels,
//                      head_hidden, ffn_hidden, query, offset_init },
//     "train":       { epochs, batch_points, lr, weight_decay, optimizer,
//                      sgd_momentum, baseline_level, learn_offsets,
//                      offset_lr_scale, disturbance, fusion,
//                      train_scenes, test_scenes },
//     "disturbance": { probability, max_rot_deg, max_trans_m },
//     "robustness":  { n_seeds, train_scenes, test_scenes, fusions,
//                      record_wall_time, epochs, lr },
//     "gradcheck":   { seeds, step, rtol, rtol_end_to_end, inject_fault }
//   }
//
// Every section is optional. Sub-seeds are never configured directly; they
// are derived from the top-level seed with derive_seed(seed, label).

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcafuse/experiment.hpp"
#include "dcafuse/gradcheck.hpp"
#include "dcafuse/jsonio.hpp"
#include "dcafuse/synthscene.hpp"
#include "dcafuse/trainer.hpp"

namespace dcafuse {

enum class Command { gradcheck, train, robustness, genscene };

inline const char* to_string(Command c) {
  switch (c) {
    case Command::gradcheck: return "gradcheck";
    case Command::train: return "train";
    case Command::robustness: return "robustness";
    case Command::genscene: return "genscene";
  }
  return "?";
}

struct RunConfig {
  Command command = Command::gradcheck;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  SceneConfig scene;
  TrainConfig train;                  // train command
  FusionKind fusion = FusionKind::dca_with_dqe;
  std::size_t train_scenes = 4;
  std::size_t test_scenes = 2;
  DisturbanceConfig disturbance;      // evaluation disturbance, and the "on" condition of the grid
  RobustnessConfig robustness;        // scene, train.dca and disturbance are synced on finalize
  GradcheckSettings gradcheck;

  /// Propagates the top-level seed, thread count and shared sections into
  /// the per-command structs, then validates all of them.
  void finalize() {
    scene.seed = derive_seed(seed, "scene");
    robustness.scene = scene;
    robustness.train.dca = train.dca;
    robustness.train.baseline_level = train.baseline_level;
    robustness.disturbance = disturbance;
    robustness.seed = seed;
    robustness.threads = threads;
    gradcheck.seed = seed;
    if (threads == 0) throw ConfigError("threads", "must be positive");
    validate_as_config("scene", [&] { scene.validate(); });
    validate_as_config("train", [&] { train.validate(); });
    if (train.train_disturbance) validate_as_config("train.disturbance", [&] { train.train_disturbance->validate(); });
    validate_as_config("disturbance", [&] { disturbance.validate(); });
    validate_as_config("robustness", [&] { robustness.validate(); });
    validate_as_config("gradcheck", [&] { gradcheck.validate(); });
    if (train_scenes == 0) throw ConfigError("train.train_scenes", "must be positive");
    if (test_scenes == 0) throw ConfigError("train.test_scenes", "must be positive");
    if (scene.lidar_channels != train.dca.channels) {
      throw ConfigError("dca.channels", "must equal scene.lidar_channels (" + std::to_string(scene.lidar_channels) + ")");
    }
  }
};

/// Training defaults of the robustness grid: fewer epochs at a larger step
/// than the single-run defaults, sized to finish the grid on one CPU.
inline TrainConfig robustness_train_defaults() {
  TrainConfig t;
  t.epochs = 8;
  t.lr = 1e-3;
  return t;
}

namespace detail {

template <class Enum, class Parse>
Enum parse_enum(JsonFields& f, const std::string& key, Enum current, Parse parse) {
  const nlohmann::json* v = f.find(key);
  if (!v) return current;
  const std::string s = JsonFields::convert<std::string>(*v, f.path(key));
  try {
    return parse(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(f.path(key), e.what());
  }
}

inline OffsetInit offset_init_from_string(const std::string& s) {
  if (s == "directional") return OffsetInit::directional;
  if (s == "zero") return OffsetInit::zero;
  throw std::invalid_argument("unknown offset_init '" + s + "'");
}

inline void reject_seed(const nlohmann::json& obj, const std::string& path) {
  if (obj.is_object() && obj.contains("seed")) {
    throw ConfigError(path + ".seed", "sub-seeds are derived; set the top-level seed instead");
  }
}

inline DisturbanceConfig parse_disturbance(const nlohmann::json& j, const std::string& path) {
  reject_seed(j, path);
  DisturbanceConfig d;
  JsonFields f(j, path);
  f.read("probability", d.probability);
  f.read("max_rot_deg", d.max_rot_deg);
  f.read("max_trans_m", d.max_trans_m);
  f.finish();
  validate_as_config(path, [&] { d.validate(); });
  return d;
}

inline DcaHyper parse_dca(const nlohmann::json& j) {
  DcaHyper h;
  JsonFields f(j, "dca");
  f.read("levels", h.levels);
  f.read("directions", h.directions);
  f.read("points_per_direction", h.points_per_direction);
  f.read("channels", h.channels);
  f.read("head_hidden", h.head_hidden);
  f.read("ffn_hidden", h.ffn_hidden);
  h.query = parse_enum(f, "query", h.query, query_mode_from_string);
  h.offset_init = parse_enum(f, "offset_init", h.offset_init, offset_init_from_string);
  f.finish();
  validate_as_config("dca", [&] { h.validate(); });
  return h;
}

inline void parse_train(const nlohmann::json& j, RunConfig& rc) {
  reject_seed(j, "train");
  TrainConfig& t = rc.train;
  JsonFields f(j, "train");
  f.read("epochs", t.epochs);
  f.read("batch_points", t.batch_points);
  f.read("lr", t.lr);
  f.read("weight_decay", t.weight_decay);
  t.optimizer = parse_enum(f, "optimizer", t.optimizer, optimizer_kind_from_string);
  f.read("sgd_momentum", t.sgd_momentum);
  f.read("baseline_level", t.baseline_level);
  f.read("learn_offsets", t.learn_offsets);
  f.read("offset_lr_scale", t.offset_lr_scale);
  if (const nlohmann::json* d = f.find("disturbance")) {
    if (!d->is_null()) t.train_disturbance = parse_disturbance(*d, "train.disturbance");
  }
  rc.fusion = parse_enum(f, "fusion", rc.fusion, fusion_kind_from_string);
  f.read("train_scenes", rc.train_scenes);
  f.read("test_scenes", rc.test_scenes);
  f.finish();
}

inline void parse_robustness(const nlohmann::json& j, RunConfig& rc) {
  reject_seed(j, "robustness");
  RobustnessConfig& r = rc.robustness;
  JsonFields f(j, "robustness");
  f.read("n_seeds", r.n_seeds);
  f.read("train_scenes", r.train_scenes);
  f.read("test_scenes", r.test_scenes);
  f.read("record_wall_time", r.record_wall_time);
  f.read("epochs", r.train.epochs);
  f.read("lr", r.train.lr);
  f.read("batch_points", r.train.batch_points);
  f.read("offset_lr_scale", r.train.offset_lr_scale);
  if (const nlohmann::json* fu = f.find("fusions")) {
    if (!fu->is_array()) throw ConfigError("robustness.fusions", "expected an array of fusion names");
    r.fusions.clear();
    for (std::size_t i = 0; i < fu->size(); ++i) {
      const std::string where = "robustness.fusions[" + std::to_string(i) + "]";
      const std::string s = JsonFields::convert<std::string>((*fu)[i], where);
      try {
        const FusionKind k = fusion_kind_from_string(s);
        if (std::find(r.fusions.begin(), r.fusions.end(), k) != r.fusions.end()) {
          throw ConfigError(where, "duplicate fusion '" + s + "'");
        }
        r.fusions.push_back(k);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(where, e.what());
      }
    }
  }
  f.finish();
}

inline void parse_gradcheck(const nlohmann::json& j, RunConfig& rc) {
  reject_seed(j, "gradcheck");
  GradcheckSettings& g = rc.gradcheck;
  JsonFields f(j, "gradcheck");
  f.read("seeds", g.seeds);
  f.read("step", g.step);
  f.read("rtol", g.rtol);
  f.read("rtol_end_to_end", g.rtol_end_to_end);
  f.read("inject_fault", g.inject_fault);
  f.finish();
  if (!g.inject_fault.empty()) {
    bool known = false;
    for (const auto& p : gradcheck_registry()) known = known || p.name == g.inject_fault;
    if (!known) throw ConfigError("gradcheck.inject_fault", "no registered primitive named '" + g.inject_fault + "'");
  }
}

}  // namespace detail

/// Parses and fully validates a run configuration. Throws ConfigError naming
/// the first offending field.
inline RunConfig parse_run_config(const nlohmann::json& doc) {
  RunConfig rc;
  rc.robustness.train = robustness_train_defaults();
  JsonFields root(doc, "");
  const std::string cmd = root.require<std::string>("command");
  if (cmd == "gradcheck") {
    rc.command = Command::gradcheck;
  } else if (cmd == "train") {
    rc.command = Command::train;
  } else if (cmd == "robustness") {
    rc.command = Command::robustness;
  } else if (cmd == "genscene") {
    rc.command = Command::genscene;
  } else {
    throw ConfigError("command", "unknown command '" + cmd + "' (gradcheck, train, robustness, genscene)");
  }
  root.read("seed", rc.seed);
  root.read("threads", rc.threads);
  if (const auto* s = root.find("scene")) {
    detail::reject_seed(*s, "scene");
    rc.scene = scene_config_from_json(*s, rc.scene, "scene");
  }
  if (const auto* s = root.find("dca")) rc.train.dca = detail::parse_dca(*s);
  if (const auto* s = root.find("train")) detail::parse_train(*s, rc);
  if (const auto* s = root.find("disturbance")) rc.disturbance = detail::parse_disturbance(*s, "disturbance");
  if (const auto* s = root.find("robustness")) detail::parse_robustness(*s, rc);
  if (const auto* s = root.find("gradcheck")) detail::parse_gradcheck(*s, rc);
  root.finish();
  rc.finalize();
  return rc;
}

inline RunConfig parse_run_config_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", std::string("not valid JSON: ") + e.what());
  }
  return parse_run_config(doc);
}

}  // namespace dcafuse
