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

// Calibration-robustness grid: fusion kinds x training disturbance x
// evaluation disturbance, repeated over seeds.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dcafuse/trainer.hpp"
#include "json.hpp"

namespace dcafuse {

struct RobustnessConfig {
  SceneConfig scene;
  TrainConfig train;
  DisturbanceConfig disturbance;  // shared by the training and evaluation "on" conditions
  std::size_t n_seeds = 5;
  std::uint64_t seed = 0;
  std::size_t train_scenes = 16;
  std::size_t test_scenes = 4;
  std::vector<FusionKind> fusions{FusionKind::one_to_one, FusionKind::dca_no_dqe, FusionKind::dca_with_dqe};
  std::size_t threads = 1;
  bool record_wall_time = false;  // off keeps the CSV byte-reproducible

  void validate() const {
    scene.validate();
    train.validate();
    disturbance.validate();
    if (n_seeds < 3) throw std::invalid_argument("robustness.n_seeds must be >= 3");
    if (train_scenes == 0) throw std::invalid_argument("robustness.train_scenes must be positive");
    if (test_scenes == 0) throw std::invalid_argument("robustness.test_scenes must be positive");
    if (fusions.empty()) throw std::invalid_argument("robustness.fusions must not be empty");
    if (threads == 0) throw std::invalid_argument("robustness.threads must be positive");
  }
};

struct RobustnessRow {
  FusionKind fusion = FusionKind::one_to_one;
  bool train_dist = false;
  bool eval_dist = false;
  std::size_t seed_index = 0;
  ExperimentReport report;
};

struct CellStats {
  FusionKind fusion = FusionKind::one_to_one;
  bool train_dist = false;
  bool eval_dist = false;
  Real accuracy_mean = 0.0, accuracy_std = 0.0;
  Real clean_accuracy_mean = 0.0, clean_accuracy_std = 0.0;
  Real loss_mean = 0.0, loss_std = 0.0;
};

struct RobustnessResult {
  std::vector<RobustnessRow> rows;  // ordered by seed, fusion, train_dist, eval_dist
  std::vector<CellStats> cells;     // ordered by fusion, train_dist, eval_dist
  Real wall_time_s = 0.0;

  const CellStats& cell(FusionKind f, bool train_dist, bool eval_dist) const {
    for (const auto& c : cells) {
      if (c.fusion == f && c.train_dist == train_dist && c.eval_dist == eval_dist) return c;
    }
    throw std::out_of_range(std::string("no cell for fusion ") + to_string(f));
  }
};

struct SeedScenes {
  std::vector<LabeledScene> train, test;
};

/// Scenes for seed index `s`. Train and test seeds are drawn from separate
/// labelled streams and checked to be disjoint.
inline SeedScenes make_seed_scenes(const RobustnessConfig& cfg, std::size_t s) {
  const std::uint64_t root = derive_seed(cfg.seed, "seed/" + std::to_string(s));
  SeedScenes out;
  std::set<std::uint64_t> train_seeds;
  for (std::size_t i = 0; i < cfg.train_scenes; ++i) {
    SceneConfig sc = cfg.scene;
    sc.seed = derive_seed(root, "scene/train/" + std::to_string(i));
    train_seeds.insert(sc.seed);
    out.train.push_back(generate_scene(sc));
  }
  for (std::size_t i = 0; i < cfg.test_scenes; ++i) {
    SceneConfig sc = cfg.scene;
    sc.seed = derive_seed(root, "scene/test/" + std::to_string(i));
    if (train_seeds.count(sc.seed)) throw std::logic_error("held-out scene seed collides with a training scene seed");
    out.test.push_back(generate_scene(sc));
  }
  return out;
}

namespace detail {

inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline std::pair<Real, Real> mean_std(const std::vector<Real>& xs) {
  Real m = 0.0;
  for (Real x : xs) m += x;
  m /= static_cast<Real>(xs.size());
  Real v = 0.0;
  for (Real x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / static_cast<Real>(xs.size() - 1)) : 0.0};
}

}  // namespace detail

/// Training configuration of one grid job.
inline TrainConfig job_train_config(const RobustnessConfig& cfg, std::size_t s, bool train_dist) {
  const std::uint64_t root = derive_seed(cfg.seed, "seed/" + std::to_string(s));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(root, "train");
  tc.train_disturbance.reset();
  if (train_dist) {
    DisturbanceConfig dc = cfg.disturbance;
    dc.seed = derive_seed(root, "disturb/train");
    tc.train_disturbance = dc;
  }
  return tc;
}

inline DisturbanceConfig job_eval_disturbance(const RobustnessConfig& cfg, std::size_t s) {
  DisturbanceConfig dc = cfg.disturbance;
  dc.seed = derive_seed(derive_seed(cfg.seed, "seed/" + std::to_string(s)), "disturb/eval");
  return dc;
}

inline std::vector<CellStats> summarize(const std::vector<RobustnessRow>& rows, const std::vector<FusionKind>& fusions) {
  std::vector<CellStats> cells;
  for (FusionKind f : fusions) {
    for (bool td : {false, true}) {
      for (bool ed : {false, true}) {
        std::vector<Real> acc, clean, loss;
        for (const auto& r : rows) {
          if (r.fusion != f || r.train_dist != td || r.eval_dist != ed) continue;
          acc.push_back(r.report.accuracy);
          clean.push_back(r.report.clean_accuracy);
          loss.push_back(r.report.loss_of_disturbance);
        }
        if (acc.empty()) continue;
        CellStats c{f, td, ed};
        std::tie(c.accuracy_mean, c.accuracy_std) = detail::mean_std(acc);
        std::tie(c.clean_accuracy_mean, c.clean_accuracy_std) = detail::mean_std(clean);
        std::tie(c.loss_mean, c.loss_std) = detail::mean_std(loss);
        cells.push_back(c);
      }
    }
  }
  return cells;
}

/// Runs the full grid. Each (seed, fusion, train_dist) job trains one model
/// and evaluates it with evaluation disturbance off and on.
inline RobustnessResult robustness_experiment(const RobustnessConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SeedScenes> scenes(cfg.n_seeds);
  detail::parallel_for(cfg.n_seeds, cfg.threads, [&](std::size_t s) { scenes[s] = make_seed_scenes(cfg, s); });

  const std::size_t nf = cfg.fusions.size();
  const std::size_t n_jobs = cfg.n_seeds * nf * 2;
  std::vector<RobustnessRow> rows(n_jobs * 2);
  detail::parallel_for(n_jobs, cfg.threads, [&](std::size_t j) {
    const std::size_t s = j / (nf * 2), f = (j / 2) % nf;
    const bool td = (j % 2) == 1;
    const auto start = std::chrono::steady_clock::now();
    const TrainedModel tm = train_model(cfg.fusions[f], scenes[s].train, job_train_config(cfg, s, td));
    const Real train_time = std::chrono::duration<Real>(std::chrono::steady_clock::now() - start).count();
    ExperimentReport on = evaluate(tm.model, scenes[s].test, job_eval_disturbance(cfg, s));
    ExperimentReport off = evaluate(tm.model, scenes[s].test, std::nullopt);
    off.wall_time_s += train_time;
    on.wall_time_s += train_time;
    rows[2 * j] = RobustnessRow{cfg.fusions[f], td, false, s, off};
    rows[2 * j + 1] = RobustnessRow{cfg.fusions[f], td, true, s, on};
  });

  RobustnessResult res;
  res.rows = std::move(rows);
  res.cells = summarize(res.rows, cfg.fusions);
  res.wall_time_s = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline void write_robustness_csv(std::ostream& os, const RobustnessResult& res, bool with_wall_time) {
  os << "fusion,train_dist,eval_dist,seed,accuracy,loss_of_disturbance,wall_time_s\n";
  char buf[256];
  for (const auto& r : res.rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%zu,%.6f,%.6f,%.3f\n", to_string(r.fusion), r.train_dist ? "on" : "off",
                  r.eval_dist ? "on" : "off", r.seed_index, r.report.accuracy, r.report.loss_of_disturbance,
                  with_wall_time ? r.report.wall_time_s : 0.0);
    os << buf;
  }
}

/// Per-cell means and standard deviations, plus for each fusion the drop from
/// clean training and evaluation to disturbed training and evaluation.
inline nlohmann::json robustness_summary_json(const RobustnessConfig& cfg, const RobustnessResult& res) {
  nlohmann::json j;
  j["n_seeds"] = cfg.n_seeds;
  j["wall_time_s"] = res.wall_time_s;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : res.cells) {
    j["cells"].push_back({{"fusion", to_string(c.fusion)},
                          {"train_dist", c.train_dist},
                          {"eval_dist", c.eval_dist},
                          {"accuracy_mean", c.accuracy_mean},
                          {"accuracy_std", c.accuracy_std},
                          {"clean_accuracy_mean", c.clean_accuracy_mean},
                          {"clean_accuracy_std", c.clean_accuracy_std},
                          {"loss_of_disturbance_mean", c.loss_mean},
                          {"loss_of_disturbance_std", c.loss_std}});
  }
  for (FusionKind f : cfg.fusions) {
    j["clean_to_disturbed_drop"][to_string(f)] =
        res.cell(f, false, false).accuracy_mean - res.cell(f, true, true).accuracy_mean;
  }
  return j;
}

inline void print_robustness_table(std::ostream& os, const RobustnessResult& res) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %-6s %-6s %-18s %-18s\n", "fusion", "train", "eval", "accuracy", "loss_of_dist");
  os << buf;
  for (const auto& c : res.cells) {
    std::snprintf(buf, sizeof buf, "%-14s %-6s %-6s %.4f +- %.4f    %+.4f +- %.4f\n", to_string(c.fusion),
                  c.train_dist ? "on" : "off", c.eval_dist ? "on" : "off", c.accuracy_mean, c.accuracy_std, c.loss_mean,
                  c.loss_std);
    os << buf;
  }
}

struct OffsetAblation {
  std::vector<Real> learned;  // clean test accuracy per seed
  std::vector<Real> fixed;
};

/// Single-sample DCA (L = M = D = 1, zero initial offset) trained with the
/// offset head learnable versus frozen at zero, on clean calibration.
inline OffsetAblation offset_learning_ablation(const RobustnessConfig& cfg) {
  cfg.validate();
  std::vector<SeedScenes> scenes(cfg.n_seeds);
  detail::parallel_for(cfg.n_seeds, cfg.threads, [&](std::size_t s) { scenes[s] = make_seed_scenes(cfg, s); });
  OffsetAblation out{std::vector<Real>(cfg.n_seeds), std::vector<Real>(cfg.n_seeds)};
  detail::parallel_for(cfg.n_seeds * 2, cfg.threads, [&](std::size_t j) {
    const std::size_t s = j / 2;
    const bool learned = j % 2 == 0;
    TrainConfig tc = job_train_config(cfg, s, false);
    tc.dca.levels = tc.dca.directions = tc.dca.points_per_direction = 1;
    tc.dca.offset_init = OffsetInit::zero;
    tc.learn_offsets = learned;
    const TrainedModel tm = train_model(FusionKind::dca_with_dqe, scenes[s].train, tc);
    (learned ? out.learned : out.fixed)[s] = evaluate(tm.model, scenes[s].test, std::nullopt).accuracy;
  });
  return out;
}

}  // namespace dcafuse
