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

// Command implementations behind the dcafuse executable.
//
// A run validates its whole config, refuses an existing output directory
// unless overwriting is allowed, writes everything into a sibling temporary
// directory, and renames it into place only once the command has finished.
// The config text is copied verbatim to <out>/config.json.

#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "json.hpp"

#include "dcafuse/checkpoint.hpp"
#include "dcafuse/config.hpp"
#include "dcafuse/experiment.hpp"
#include "dcafuse/gradcheck.hpp"
#include "dcafuse/synthscene.hpp"
#include "dcafuse/trainer.hpp"

namespace dcafuse {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,  // the command ran but its checks failed
  kExitUsage = 2,        // bad flags, bad config, refused output directory
  kExitRuntime = 3,      // failure while running
};

struct CliOptions {
  Command command = Command::gradcheck;
  std::filesystem::path config;
  std::filesystem::path out;
  bool overwrite = false;
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
};

/// Thread count: --threads, else DCAFUSE_THREADS, else the config value.
inline std::optional<std::size_t> threads_from_env(const char* value) {
  if (!value || !*value) return std::nullopt;
  char* end = nullptr;
  const unsigned long long n = std::strtoull(value, &end, 10);
  if (*end != '\0' || n == 0) throw ConfigError("DCAFUSE_THREADS", "must be a positive integer");
  return static_cast<std::size_t>(n);
}

/// Staging directory renamed onto the destination by commit().
class OutputDir {
 public:
  OutputDir(std::filesystem::path dest, bool overwrite) : dest_(std::move(dest)), overwrite_(overwrite) {
    if (std::filesystem::exists(dest_) && !overwrite_) {
      throw ConfigError("--out", dest_.string() + " exists; pass --overwrite to replace it");
    }
    std::random_device rd;
    const auto parent = dest_.has_parent_path() ? dest_.parent_path() : std::filesystem::path(".");
    std::filesystem::create_directories(parent);
    staging_ = parent / ("." + dest_.filename().string() + ".tmp-" + std::to_string(rd()));
    std::filesystem::create_directories(staging_);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;
  ~OutputDir() {
    std::error_code ec;
    if (!committed_) std::filesystem::remove_all(staging_, ec);
  }

  const std::filesystem::path& path() const { return staging_; }

  void commit() {
    if (std::filesystem::exists(dest_)) {
      if (!overwrite_) throw ConfigError("--out", dest_.string() + " appeared while running; not overwriting");
      std::filesystem::remove_all(dest_);
    }
    std::filesystem::rename(staging_, dest_);
    committed_ = true;
  }

 private:
  std::filesystem::path dest_, staging_;
  bool overwrite_;
  bool committed_ = false;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot write " + p.string());
  os << text;
  if (!os) throw FormatError("write failed: " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("--config", "cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Commands. Each writes into `dir` and logs to `log`.

inline int cmd_gradcheck(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& log) {
  const GradcheckReport report = run_gradcheck(cfg.gradcheck);
  write_text(dir / "gradcheck.json", gradcheck_report_json(report, cfg.gradcheck).dump(2) + "\n");
  char buf[256];
  for (const auto& r : report.results) {
    std::snprintf(buf, sizeof buf, "%-4s %-20s max_rel_error %.3e  tol %.0e  seeds %zu  kink_retries %zu\n",
                  r.passed ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_error, r.tolerance, r.seeds, r.retries);
    log << buf;
  }
  std::snprintf(buf, sizeof buf, "gradcheck %s in %.1f s\n", report.passed() ? "passed" : "FAILED", report.wall_time_s);
  log << buf;
  if (!report.passed()) {
    std::string names;
    for (const auto& n : report.failures()) names += (names.empty() ? "" : ", ") + n;
    std::cerr << "gradcheck: failing primitive(s): " << names << "\n";
    return kExitCheckFailed;
  }
  return kExitOk;
}

/// Scenes of the train command: seed index 0 of the grid's scene streams.
inline SeedScenes train_command_scenes(const RunConfig& cfg) {
  RobustnessConfig rc = cfg.robustness;
  rc.train_scenes = cfg.train_scenes;
  rc.test_scenes = cfg.test_scenes;
  return make_seed_scenes(rc, 0);
}

inline TrainConfig train_command_config(const RunConfig& cfg) {
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  if (tc.train_disturbance) tc.train_disturbance->seed = derive_seed(cfg.seed, "disturb/train");
  return tc;
}

inline nlohmann::json checkpoint_meta(const FusionModel& m, const SceneConfig& scene) {
  const DcaHyper& h = m.dca.hyper;
  return {{"fusion", to_string(m.kind)},
          {"dca",
           {{"levels", h.levels},
            {"directions", h.directions},
            {"points_per_direction", h.points_per_direction},
            {"channels", h.channels},
            {"head_hidden", h.head_hidden},
            {"ffn_hidden", h.ffn_hidden},
            {"query", to_string(h.query)}}},
          {"baseline_level", m.o2o.level},
          {"scene", scene_config_to_json(scene)}};
}

inline int cmd_train(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& log) {
  const SeedScenes scenes = train_command_scenes(cfg);
  const TrainConfig tc = train_command_config(cfg);
  TrainedModel tm = train_model(cfg.fusion, scenes.train, tc);

  save_checkpoint(dir / "checkpoint", tm.model, checkpoint_meta(tm.model, cfg.scene));
  {
    std::ostringstream csv;
    csv << "epoch,loss,accuracy\n";
    char buf[128];
    for (std::size_t e = 0; e < tm.history.loss.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", e, tm.history.loss[e], tm.history.accuracy[e]);
      csv << buf;
    }
    write_text(dir / "history.csv", csv.str());
  }
  DisturbanceConfig eval_dist = cfg.disturbance;
  eval_dist.seed = derive_seed(cfg.seed, "disturb/eval");
  const ExperimentReport train_rep = evaluate(tm.model, scenes.train, std::nullopt);
  const ExperimentReport test_rep = evaluate(tm.model, scenes.test, eval_dist);
  const nlohmann::json report = {{"fusion", to_string(cfg.fusion)},
                                 {"epochs", tc.epochs},
                                 {"train_accuracy", train_rep.accuracy},
                                 {"test_clean_accuracy", test_rep.clean_accuracy},
                                 {"test_disturbed_accuracy", test_rep.accuracy},
                                 {"loss_of_disturbance", test_rep.loss_of_disturbance},
                                 {"per_class_accuracy", test_rep.per_class_accuracy}};
  write_text(dir / "report.json", report.dump(2) + "\n");
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "%s: final loss %.4f, train accuracy %.4f, test clean %.4f, disturbed %.4f, loss of disturbance %+.4f\n",
                to_string(cfg.fusion), tm.history.loss.back(), train_rep.accuracy, test_rep.clean_accuracy,
                test_rep.accuracy, test_rep.loss_of_disturbance);
  log << buf;
  return kExitOk;
}

inline int cmd_robustness(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& log) {
  const RobustnessResult res = robustness_experiment(cfg.robustness);
  std::ostringstream csv;
  write_robustness_csv(csv, res, cfg.robustness.record_wall_time);
  write_text(dir / "robustness.csv", csv.str());
  write_text(dir / "summary.json", robustness_summary_json(cfg.robustness, res).dump(2) + "\n");
  print_robustness_table(log, res);
  char buf[64];
  std::snprintf(buf, sizeof buf, "grid finished in %.1f s\n", res.wall_time_s);
  log << buf;
  return kExitOk;
}

inline int cmd_genscene(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& log) {
  const LabeledScene scene = generate_scene(cfg.scene);
  save_scene(scene, dir / "scene");
  log << "scene with " << scene.points.size() << " points and " << scene.rig.size() << " cameras written\n";
  return kExitOk;
}

/// Full run: parse, override, validate, stage, execute, commit.
inline int run_command(const CliOptions& opt, std::ostream& log, std::ostream& err) {
  std::string text;
  RunConfig cfg;
  std::optional<OutputDir> out;
  try {
    text = read_text(opt.config);
    cfg = parse_run_config_text(text);
    if (cfg.command != opt.command) {
      throw ConfigError("command", std::string("config is for '") + to_string(cfg.command) + "' but '" +
                                       to_string(opt.command) + "' was requested");
    }
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.threads) {
      cfg.threads = *opt.threads;
    } else if (auto env = threads_from_env(std::getenv("DCAFUSE_THREADS"))) {
      cfg.threads = *env;
    }
    cfg.finalize();
    if (opt.out.empty()) throw ConfigError("--out", "an output directory is required");
    out.emplace(opt.out, opt.overwrite);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    write_text(out->path() / "config.json", text);
    int code = kExitOk;
    switch (cfg.command) {
      case Command::gradcheck: code = cmd_gradcheck(cfg, out->path(), log); break;
      case Command::train: code = cmd_train(cfg, out->path(), log); break;
      case Command::robustness: code = cmd_robustness(cfg, out->path(), log); break;
      case Command::genscene: code = cmd_genscene(cfg, out->path(), log); break;
    }
    out->commit();
    return code;
  } catch (const TrainingError& e) {
    err << "training error at epoch " << e.epoch() << ": " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
  }
  return kExitRuntime;
}

}  // namespace dcafuse
