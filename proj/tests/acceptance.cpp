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

// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   dcafuse_acceptance [--work DIR] [--only N[,N...]]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dcafuse/baseline.hpp"
#include "dcafuse/cli.hpp"
#include "dcafuse/config.hpp"
#include "dcafuse/dca.hpp"
#include "dcafuse/experiment.hpp"
#include "dcafuse/gradcheck.hpp"
#include "dcafuse/synthscene.hpp"

namespace dcafuse {
namespace {

namespace fs = std::filesystem;

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Verdict gradient_suite() {
  GradcheckSettings s;  // 20 seeds, h = 1e-4, rtol 1e-4, end-to-end 1e-3
  const GradcheckReport r = run_gradcheck(s);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& x : r.results) {
    if (x.max_rel_error / x.tolerance > worst) {
      worst = x.max_rel_error / x.tolerance;
      worst_name = x.name;
    }
  }
  std::string failing;
  for (const auto& n : r.failures()) failing += " " + n;
  const bool ok = r.passed() && s.seeds >= 20 && r.wall_time_s < 120.0;
  return {ok, fmt("%zu primitives x %zu seeds, worst error/tolerance %.3f (%s), %.1f s%s%s", r.results.size(), s.seeds,
                  worst, worst_name.c_str(), r.wall_time_s, failing.empty() ? "" : ", failing:", failing.c_str())};
}

Verdict softmax_normalization() {
  Rng rng(derive_seed(0, "acceptance/softmax"));
  DcaHyper h;  // L=4, M=8, D=4, C=16
  DcaParams p = DcaParams::init(h, 16, {16, 16, 16, 16}, 256, 256, rng);
  // Non-trivial weight head so the logits vary with the query.
  for (auto& layer : p.weight_head.layers) {
    for (auto& v : layer.weight.vec()) v = 0.5 * rng.normal();
    for (auto& v : layer.bias.vec()) v = 0.5 * rng.normal();
  }
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    std::vector<Real> q(2 * h.channels);
    for (auto& v : q) v = 4.0 * rng.normal();
    const auto w = predict_weights(q, p);
    worst = std::max(worst, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
  }
  return {worst <= 1e-6, fmt("10000 queries, max |sum - 1| = %.2e", worst)};
}

Verdict degenerate_equivalence() {
  double worst = 0.0;
  std::size_t compared = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    SceneConfig sc;
    sc.seed = derive_seed(0, "acceptance/degenerate/" + std::to_string(i));
    sc.n_points = 64;
    sc.image_px = 64;
    sc.lidar_channels = sc.image_channels();
    const LabeledScene s = generate_scene(sc);
    Rng rng(sc.seed);
    const DcaParams dp = degenerate_dca_params(sc.image_channels(), sc.image_channels(), rng);
    const OneToOneParams op = OneToOneParams::init(sc.lidar_channels, sc.image_channels(), sc.lidar_channels, rng, 0);
    DynamicCrossAttention dca(dp);
    OneToOneFusion o2o(op);
    const Tensor a = dca.forward(s.points, s.pyramids, s.rig).image_value;
    const Tensor b = o2o.forward(s.points, s.pyramids, s.rig).image_feature;
    for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
    compared += a.size();
  }
  return {worst <= 1e-6, fmt("100 scenes, %zu values, max |dca - one_to_one| = %.2e", compared, worst)};
}

Verdict coordinate_normalization() {
  const LabeledScene s = generate_scene(SceneConfig{.seed = derive_seed(0, "acceptance/coords")});
  const ReferencePointSet base = project(s.rig, s.points.coords);
  double worst_stride = 0.0, worst_scale = 0.0;
  bool masks_equal = true;
  // Per-stride cameras: pixel rows of P and the image size divided by the stride.
  for (std::size_t stride : kStrides) {
    CameraRig r = s.rig;
    for (auto& c : r.cameras) {
      c.proj.topRows<2>() /= static_cast<double>(stride);
      c.width_px /= stride;
      c.height_px /= stride;
    }
    const ReferencePointSet ref = project(r, s.points.coords);
    masks_equal = masks_equal && ref.valid == base.valid;
    for (std::size_t i = 0; i < ref.coords.size(); ++i) worst_stride = std::max(worst_stride, std::abs(ref.coords[i] - base.coords[i]));
  }
  CameraRig big = s.rig;
  for (auto& c : big.cameras) {
    c.proj.topRows<2>() *= 2.0;
    c.width_px *= 2;
    c.height_px *= 2;
  }
  const ReferencePointSet ref2 = project(big, s.points.coords);
  masks_equal = masks_equal && ref2.valid == base.valid;
  for (std::size_t i = 0; i < ref2.coords.size(); ++i) worst_scale = std::max(worst_scale, std::abs(ref2.coords[i] - base.coords[i]));
  return {masks_equal && worst_stride <= 1e-12 && worst_scale <= 1e-12,
          fmt("max deviation across strides %.2e, under x2 rescale %.2e, masks %s", worst_stride, worst_scale,
              masks_equal ? "equal" : "DIFFER")};
}

struct GridRuns {
  RobustnessResult result;
  std::string csv_first, csv_second;
  double seconds_first = 0.0;
  RunConfig config;
};

/// Runs the robustness command twice through the CLI path, threads 1 then 2.
GridRuns run_grid(const fs::path& work) {
  GridRuns g;
  const std::string text = R"({"command": "robustness", "seed": 0})";
  fs::create_directories(work);
  write_text(work / "robustness_config.json", text);
  for (int run = 0; run < 2; ++run) {
    CliOptions opt;
    opt.command = Command::robustness;
    opt.config = work / "robustness_config.json";
    opt.out = work / (run == 0 ? "robustness_threads1" : "robustness_threads2");
    opt.overwrite = true;
    opt.threads = run == 0 ? 1 : 2;
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream log;
    const int code = run_command(opt, log, std::cerr);
    if (code != kExitOk) throw std::runtime_error("robustness command failed with exit code " + std::to_string(code));
    if (run == 0) {
      g.seconds_first = seconds_since(t0);
      std::cout << log.str();
    }
    (run == 0 ? g.csv_first : g.csv_second) = read_text(opt.out / "robustness.csv");
  }
  g.config = parse_run_config_text(text);
  // Rebuild the summary from the CSV rows for the verdicts.
  std::istringstream is(g.csv_first);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string f, td, ed, seed, acc, loss, wall;
    std::getline(ls, f, ',');
    std::getline(ls, td, ',');
    std::getline(ls, ed, ',');
    std::getline(ls, seed, ',');
    std::getline(ls, acc, ',');
    std::getline(ls, loss, ',');
    RobustnessRow r;
    r.fusion = fusion_kind_from_string(f);
    r.train_dist = td == "on";
    r.eval_dist = ed == "on";
    r.seed_index = std::stoul(seed);
    r.report.accuracy = std::stod(acc);
    r.report.loss_of_disturbance = std::stod(loss);
    r.report.clean_accuracy = r.report.accuracy + r.report.loss_of_disturbance;
    g.result.rows.push_back(r);
  }
  g.result.cells = summarize(g.result.rows, g.config.robustness.fusions);
  return g;
}

Verdict disturbance_loss_ordering(const GridRuns& g) {
  const CellStats& o2o = g.result.cell(FusionKind::one_to_one, true, true);
  const CellStats& dqe = g.result.cell(FusionKind::dca_with_dqe, true, true);
  const double ratio = dqe.loss_mean > 0.0 ? o2o.loss_mean / dqe.loss_mean : INFINITY;
  const bool direction = o2o.loss_mean > dqe.loss_mean;
  const bool ok = direction && ratio >= 1.5 && g.config.robustness.n_seeds >= 5 && g.seconds_first < 900.0;
  return {ok, fmt("train+eval disturbance, %zu seeds: loss one_to_one %.4f +- %.4f, dca_with_dqe %.4f +- %.4f, "
                  "ratio %.2f (need >= 1.5, direction %s), grid %.0f s",
                  g.config.robustness.n_seeds, o2o.loss_mean, o2o.loss_std, dqe.loss_mean, dqe.loss_std, ratio,
                  direction ? "holds" : "reversed", g.seconds_first)};
}

Verdict dqe_clean_accuracy(const GridRuns& g) {
  // Models trained with disturbance, evaluated on clean calibration.
  const CellStats& dqe = g.result.cell(FusionKind::dca_with_dqe, true, false);
  const CellStats& plain = g.result.cell(FusionKind::dca_no_dqe, true, false);
  const double diff = dqe.accuracy_mean - plain.accuracy_mean;
  const double sd = std::max(dqe.accuracy_std, plain.accuracy_std);
  if (diff >= 0.0) {
    return {true, fmt("clean accuracy dca_with_dqe %.4f +- %.4f >= dca_no_dqe %.4f +- %.4f", dqe.accuracy_mean,
                      dqe.accuracy_std, plain.accuracy_mean, plain.accuracy_std)};
  }
  if (-diff <= sd) {
    return {true, fmt("TIE within 1 sd: dca_with_dqe %.4f +- %.4f vs dca_no_dqe %.4f +- %.4f", dqe.accuracy_mean,
                      dqe.accuracy_std, plain.accuracy_mean, plain.accuracy_std)};
  }
  return {false, fmt("dca_with_dqe %.4f +- %.4f < dca_no_dqe %.4f +- %.4f beyond 1 sd", dqe.accuracy_mean,
                     dqe.accuracy_std, plain.accuracy_mean, plain.accuracy_std)};
}

Verdict learned_offset(const fs::path& work) {
  const RunConfig rc = parse_run_config_text(R"({"command": "robustness", "seed": 0})");
  const auto t0 = std::chrono::steady_clock::now();
  const OffsetAblation a = offset_learning_ablation(rc.robustness);
  const auto [lm, ls] = detail::mean_std(a.learned);
  const auto [fm, fs_] = detail::mean_std(a.fixed);
  std::ostringstream csv;
  csv << "seed,learned,fixed\n";
  for (std::size_t s = 0; s < a.learned.size(); ++s) csv << fmt("%zu,%.6f,%.6f\n", s, a.learned[s], a.fixed[s]);
  write_text(work / "offset_ablation.csv", csv.str());
  return {lm >= fm, fmt("clean accuracy, %zu seeds: learned offset %.4f +- %.4f, fixed zero offset %.4f +- %.4f, %.0f s",
                        a.learned.size(), lm, ls, fm, fs_, seconds_since(t0))};
}

Verdict csv_reproducible(const GridRuns& g) {
  const bool same = !g.csv_first.empty() && g.csv_first == g.csv_second;
  return {same, fmt("robustness.csv %zu bytes, rerun with 2 threads %s", g.csv_first.size(),
                    same ? "byte-identical" : "DIFFERS")};
}

}  // namespace
}  // namespace dcafuse

int main(int argc, char** argv) {
  using namespace dcafuse;
  CLI::App app{"dcafuse acceptance suite"};
  std::string work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--work", work, "directory for run outputs");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int n) { return selected.empty() || selected.count(n); };

  const char* names[] = {"",
                         "gradient suite",
                         "softmax normalization",
                         "degenerate DCA equals one-to-one",
                         "coordinate normalization",
                         "disturbance loss one_to_one > dca_with_dqe",
                         "DQE clean accuracy",
                         "learned offset >= fixed offset",
                         "CSV reproducibility"};
  int failures = 0;
  auto report = [&](int n, const Verdict& v) {
    std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << n << " (" << names[n] << "): " << v.detail << std::endl;
    failures += !v.passed;
  };
  auto guarded = [&](int n, const std::function<Verdict()>& f) {
    if (!wanted(n)) return;
    try {
      report(n, f());
    } catch (const std::exception& e) {
      report(n, Verdict{false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, gradient_suite);
  guarded(2, softmax_normalization);
  guarded(3, degenerate_equivalence);
  guarded(4, coordinate_normalization);
  if (wanted(5) || wanted(6) || wanted(8)) {
    std::optional<GridRuns> grid;
    std::string error;
    try {
      grid = run_grid(fs::path(work));
    } catch (const std::exception& e) {
      error = e.what();
    }
    for (int n : {5, 6, 8}) {
      guarded(n, [&]() -> Verdict {
        if (!grid) return {false, "grid failed: " + error};
        if (n == 5) return disturbance_loss_ordering(*grid);
        if (n == 6) return dqe_clean_accuracy(*grid);
        return csv_reproducible(*grid);
      });
    }
  }
  guarded(7, [&] { return learned_offset(fs::path(work)); });
  std::cout << (failures == 0 ? "acceptance: all criteria passed" : "acceptance: " + std::to_string(failures) + " criterion(s) failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
