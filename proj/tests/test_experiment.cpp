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

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "dcafuse/config.hpp"
#include "dcafuse/experiment.hpp"

namespace dcafuse {
namespace {

RobustnessConfig tiny_config() {
  RobustnessConfig c;
  c.scene.n_points = 48;
  c.scene.image_px = 64;
  c.train = robustness_train_defaults();
  c.train.epochs = 1;
  c.train.dca.levels = 2;
  c.train.dca.directions = 2;
  c.train.dca.points_per_direction = 1;
  c.n_seeds = 3;
  c.train_scenes = 2;
  c.test_scenes = 1;
  c.seed = 21;
  return c;
}

std::string csv_of(const RobustnessResult& r) {
  std::ostringstream os;
  write_robustness_csv(os, r, false);
  return os.str();
}

TEST(MeanStd, SampleStandardDeviation) {
  const auto [m, s] = detail::mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
}

TEST(Robustness, RejectsFewerThanThreeSeeds) {
  RobustnessConfig c = tiny_config();
  c.n_seeds = 2;
  EXPECT_THROW(robustness_experiment(c), std::invalid_argument);
}

TEST(Robustness, SeedScenesAreDisjointAcrossSplitsAndSeeds) {
  RobustnessConfig c = tiny_config();
  c.train_scenes = 3;
  c.test_scenes = 2;
  std::set<std::uint64_t> seen;
  std::size_t total = 0;
  for (std::size_t s = 0; s < c.n_seeds; ++s) {
    const SeedScenes sc = make_seed_scenes(c, s);
    for (const auto& x : sc.train) seen.insert(x.config.seed);
    for (const auto& x : sc.test) seen.insert(x.config.seed);
    total += sc.train.size() + sc.test.size();
  }
  EXPECT_EQ(seen.size(), total);
}

TEST(Robustness, GridShapeDeterminismAndThreadIndependence) {
  RobustnessConfig c = tiny_config();
  const RobustnessResult a = robustness_experiment(c);
  EXPECT_EQ(a.rows.size(), 12 * c.n_seeds);
  EXPECT_EQ(a.cells.size(), 12u);
  for (const auto& cell : a.cells) {
    EXPECT_TRUE(std::isfinite(cell.accuracy_mean));
    EXPECT_GE(cell.accuracy_std, 0.0);
    if (!cell.eval_dist) {
      EXPECT_EQ(cell.loss_mean, 0.0);
    }
  }
  const std::string csv = csv_of(a);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(12 * c.n_seeds + 1));
  EXPECT_EQ(csv, csv_of(robustness_experiment(c)));
  c.threads = 2;
  EXPECT_EQ(csv, csv_of(robustness_experiment(c)));
  c.threads = 1;
  c.seed = 22;
  EXPECT_NE(csv, csv_of(robustness_experiment(c)));
}

TEST(Robustness, SummaryJsonListsEveryCellAndDrop) {
  const RobustnessConfig c = tiny_config();
  const RobustnessResult r = robustness_experiment(c);
  const nlohmann::json j = robustness_summary_json(c, r);
  EXPECT_EQ(j["cells"].size(), 12u);
  for (const char* f : {"one_to_one", "dca_no_dqe", "dca_with_dqe"}) EXPECT_TRUE(j["clean_to_disturbed_drop"].contains(f));
  std::ostringstream table;
  print_robustness_table(table, r);
  const std::string text = table.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 13);
}

TEST(Robustness, SubsetOfFusions) {
  RobustnessConfig c = tiny_config();
  c.fusions = {FusionKind::one_to_one};
  const RobustnessResult r = robustness_experiment(c);
  EXPECT_EQ(r.rows.size(), 4 * c.n_seeds);
  EXPECT_THROW(r.cell(FusionKind::dca_with_dqe, true, true), std::out_of_range);
}

TEST(OffsetAblation, OneAccuracyPerSeedAndArm) {
  const RobustnessConfig c = tiny_config();
  const OffsetAblation a = offset_learning_ablation(c);
  ASSERT_EQ(a.learned.size(), c.n_seeds);
  ASSERT_EQ(a.fixed.size(), c.n_seeds);
  for (std::size_t s = 0; s < c.n_seeds; ++s) {
    EXPECT_TRUE(a.learned[s] >= 0.0 && a.learned[s] <= 1.0);
    EXPECT_TRUE(a.fixed[s] >= 0.0 && a.fixed[s] <= 1.0);
  }
}

}  // namespace
}  // namespace dcafuse
