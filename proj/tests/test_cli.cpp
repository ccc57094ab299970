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

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "dcafuse/cli.hpp"

namespace dcafuse {
namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("dcafuse_cli_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::unsetenv("DCAFUSE_THREADS");
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path write_config(const std::string& text, const std::string& name = "config.json") {
    const fs::path p = root_ / name;
    write_text(p, text);
    return p;
  }

  int run(Command cmd, const fs::path& config, const fs::path& out, bool overwrite = false,
          std::optional<std::uint64_t> seed = std::nullopt) {
    CliOptions opt;
    opt.command = cmd;
    opt.config = config;
    opt.out = out;
    opt.overwrite = overwrite;
    opt.seed = seed;
    log_.str("");
    err_.str("");
    return run_command(opt, log_, err_);
  }

  std::size_t entries(const fs::path& dir) const {
    return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}));
  }

  fs::path root_;
  std::ostringstream log_, err_;
};

std::string config_error(const std::string& text) {
  try {
    parse_run_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

const char* kTinyScene = R"("scene": {"n_points": 48, "image_px": 64})";

TEST(ConfigParse, ErrorsNameTheOffendingField) {
  EXPECT_EQ(config_error(R"({"command": "genscene", "scene": {"n_pointz": 3}})").rfind("scene.n_pointz", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "train", "train": {"disturbance": {"probability": 2}}})")
                .rfind("train.disturbance.probability", 0),
            0u);
  EXPECT_EQ(config_error(R"({"command": "train", "train": {"fusion": "late"}})").rfind("train.fusion", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "train", "train": {"epochs": "ten"}})").rfind("train.epochs", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "train", "train": {"seed": 3}})").rfind("train.seed", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "train", "dca": {"channels": 8}})").rfind("dca.channels", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "robustness", "robustness": {"n_seeds": 2}})").rfind("robustness.n_seeds", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "robustness", "robustness": {"fusions": ["one_to_one", "one_to_one"]}})")
                .rfind("robustness.fusions[1]", 0),
            0u);
  EXPECT_EQ(config_error(R"({"command": "gradcheck", "gradcheck": {"inject_fault": "nope"}})")
                .rfind("gradcheck.inject_fault", 0),
            0u);
  EXPECT_EQ(config_error(R"({"command": "fly"})").rfind("command", 0), 0u);
  EXPECT_EQ(config_error(R"({"seed": 1})").rfind("command", 0), 0u);
  EXPECT_EQ(config_error(R"({"command": "train", "extra": 1})").rfind("extra", 0), 0u);
  EXPECT_EQ(config_error("{not json").rfind("<document>", 0), 0u);
}

TEST(ConfigParse, DerivesSubSeedsAndSyncsSections) {
  const RunConfig a = parse_run_config_text(R"({"command": "robustness", "seed": 7, "disturbance": {"probability": 1}})");
  EXPECT_EQ(a.scene.seed, derive_seed(7, "scene"));
  EXPECT_EQ(a.robustness.seed, 7u);
  EXPECT_EQ(a.robustness.disturbance.probability, 1.0);
  EXPECT_EQ(a.robustness.train.lr, robustness_train_defaults().lr);
  EXPECT_EQ(a.robustness.train.epochs, robustness_train_defaults().epochs);
}

TEST(ConfigParse, SampleConfigsAreValid) {
  for (const auto& entry : fs::directory_iterator(DCAFUSE_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(parse_run_config_text(read_text(entry.path()))) << entry.path();
  }
}

TEST(Threads, EnvironmentValueParsing) {
  EXPECT_EQ(threads_from_env(nullptr), std::nullopt);
  EXPECT_EQ(threads_from_env(""), std::nullopt);
  EXPECT_EQ(threads_from_env("3"), std::optional<std::size_t>(3));
  EXPECT_THROW(threads_from_env("0"), ConfigError);
  EXPECT_THROW(threads_from_env("two"), ConfigError);
}

TEST_F(CliTest, GensceneWritesLoadableSceneAndVerbatimConfig) {
  const std::string text = std::string(R"({ "command": "genscene",   "seed": 3, )") + kTinyScene + "}\n";
  const fs::path cfg = write_config(text);
  ASSERT_EQ(run(Command::genscene, cfg, root_ / "out"), kExitOk) << err_.str();
  EXPECT_EQ(read_text(root_ / "out" / "config.json"), text);
  const LabeledScene s = load_scene(root_ / "out" / "scene");
  EXPECT_EQ(s.labels.size(), 48u);
  EXPECT_EQ(s.config.seed, derive_seed(3, "scene"));
}

TEST_F(CliTest, SeedFlagOverridesConfig) {
  const fs::path cfg = write_config(std::string(R"({"command": "genscene", "seed": 3, )") + kTinyScene + "}");
  ASSERT_EQ(run(Command::genscene, cfg, root_ / "out", false, 11), kExitOk) << err_.str();
  EXPECT_EQ(load_scene(root_ / "out" / "scene").config.seed, derive_seed(11, "scene"));
}

TEST_F(CliTest, RefusesExistingOutputUnlessOverwriting) {
  const fs::path cfg = write_config(std::string(R"({"command": "genscene", )") + kTinyScene + "}");
  const fs::path out = root_ / "out";
  fs::create_directories(out);
  write_text(out / "keep.txt", "precious");
  EXPECT_EQ(run(Command::genscene, cfg, out), kExitUsage);
  EXPECT_NE(err_.str().find("--out"), std::string::npos) << err_.str();
  EXPECT_EQ(read_text(out / "keep.txt"), "precious");
  ASSERT_EQ(run(Command::genscene, cfg, out, true), kExitOk) << err_.str();
  EXPECT_FALSE(fs::exists(out / "keep.txt"));
  EXPECT_TRUE(fs::exists(out / "scene" / "manifest.json"));
}

TEST_F(CliTest, ConfigErrorsExitWithUsageAndWriteNothing) {
  const fs::path cfg = write_config(R"({"command": "genscene", "scene": {"image_px": 100}})");
  EXPECT_EQ(run(Command::genscene, cfg, root_ / "out"), kExitUsage);
  EXPECT_NE(err_.str().find("scene.image_px"), std::string::npos) << err_.str();
  EXPECT_FALSE(fs::exists(root_ / "out"));
  EXPECT_EQ(entries(root_), 1u);  // only the config file
}

TEST_F(CliTest, CommandMismatchIsAUsageError) {
  const fs::path cfg = write_config(R"({"command": "genscene"})");
  EXPECT_EQ(run(Command::train, cfg, root_ / "out"), kExitUsage);
  EXPECT_NE(err_.str().find("command"), std::string::npos);
}

TEST_F(CliTest, RuntimeFailureLeavesNoPartialOutput) {
  const fs::path cfg = write_config(std::string(R"({"command": "train", )") + kTinyScene +
                                    R"(, "train": {"epochs": 2, "lr": 1e300, "optimizer": "sgd", "fusion": "one_to_one"}})");
  EXPECT_EQ(run(Command::train, cfg, root_ / "out"), kExitRuntime);
  EXPECT_NE(err_.str().find("training error at epoch"), std::string::npos) << err_.str();
  EXPECT_FALSE(fs::exists(root_ / "out"));
  EXPECT_EQ(entries(root_), 1u);  // staging directory removed
}

TEST_F(CliTest, TrainWritesCheckpointHistoryAndReport) {
  const fs::path cfg = write_config(std::string(R"({"command": "train", "seed": 2, )") + kTinyScene +
                                    R"(, "dca": {"directions": 2, "points_per_direction": 1},
      "train": {"epochs": 3, "lr": 1e-3, "train_scenes": 2, "test_scenes": 1,
                "disturbance": {"probability": 0.5}}})");
  ASSERT_EQ(run(Command::train, cfg, root_ / "out"), kExitOk) << err_.str();
  const fs::path out = root_ / "out";
  const std::string history = read_text(out / "history.csv");
  EXPECT_EQ(history.rfind("epoch,loss,accuracy\n", 0), 0u);
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 4);
  const nlohmann::json report = nlohmann::json::parse(read_text(out / "report.json"));
  for (const char* k : {"train_accuracy", "test_clean_accuracy", "test_disturbed_accuracy", "loss_of_disturbance"}) {
    EXPECT_TRUE(report.at(k).is_number()) << k;
  }

  const RunConfig rc = parse_run_config_text(read_text(cfg));
  FusionModel m = FusionModel::init(FusionKind::dca_with_dqe, rc.train, rc.scene, 12345);
  FusionModel before = m;
  load_checkpoint(out / "checkpoint", m);
  bool changed = false;
  auto a = before.tensors(false), b = m.tensors(false);
  for (std::size_t i = 0; i < a.size(); ++i) changed = changed || a[i]->vec() != b[i]->vec();
  EXPECT_TRUE(changed);
  EXPECT_EQ(read_checkpoint_manifest(out / "checkpoint")["meta"]["fusion"], "dca_with_dqe");

  // A model of a different shape is refused.
  TrainConfig other = rc.train;
  other.dca.directions = 3;
  FusionModel wrong = FusionModel::init(FusionKind::dca_with_dqe, other, rc.scene, 1);
  EXPECT_THROW(load_checkpoint(out / "checkpoint", wrong), FormatError);
  FusionModel o2o = FusionModel::init(FusionKind::one_to_one, rc.train, rc.scene, 1);
  EXPECT_THROW(load_checkpoint(out / "checkpoint", o2o), FormatError);
}

TEST_F(CliTest, ThreadPrecedenceFlagThenEnvironmentThenConfig) {
  const fs::path cfg = write_config(std::string(R"({"command": "genscene", "threads": 2, )") + kTinyScene + "}");
  ::setenv("DCAFUSE_THREADS", "0", 1);
  EXPECT_EQ(run(Command::genscene, cfg, root_ / "a"), kExitUsage);
  EXPECT_NE(err_.str().find("DCAFUSE_THREADS"), std::string::npos);
  CliOptions opt;
  opt.command = Command::genscene;
  opt.config = cfg;
  opt.out = root_ / "b";
  opt.threads = 1;
  EXPECT_EQ(run_command(opt, log_, err_), kExitOk) << err_.str();
  ::unsetenv("DCAFUSE_THREADS");
}

TEST_F(CliTest, GradcheckFaultExitsWithCheckFailureAndNamesPrimitive) {
  const fs::path cfg = write_config(R"({"command": "gradcheck", "gradcheck": {"seeds": 1, "inject_fault": "bilinear"}})");
  testing::internal::CaptureStderr();
  const int code = run(Command::gradcheck, cfg, root_ / "out");
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, kExitCheckFailed);
  EXPECT_NE(err.find("bilinear"), std::string::npos) << err;
  const nlohmann::json j = nlohmann::json::parse(read_text(root_ / "out" / "gradcheck.json"));
  EXPECT_FALSE(j["passed"].get<bool>());
  EXPECT_NE(log_.str().find("FAIL bilinear"), std::string::npos) << log_.str();
}

TEST_F(CliTest, RobustnessCsvIsByteIdenticalOnRerun) {
  const fs::path cfg = write_config(std::string(R"({"command": "robustness", "seed": 4, )") + kTinyScene +
                                    R"(, "dca": {"levels": 1, "directions": 2, "points_per_direction": 1},
      "robustness": {"n_seeds": 3, "train_scenes": 1, "test_scenes": 1, "epochs": 1}})");
  ASSERT_EQ(run(Command::robustness, cfg, root_ / "a"), kExitOk) << err_.str();
  ::setenv("DCAFUSE_THREADS", "2", 1);
  ASSERT_EQ(run(Command::robustness, cfg, root_ / "b"), kExitOk) << err_.str();
  ::unsetenv("DCAFUSE_THREADS");
  EXPECT_EQ(read_text(root_ / "a" / "robustness.csv"), read_text(root_ / "b" / "robustness.csv"));
  EXPECT_TRUE(nlohmann::json::parse(read_text(root_ / "a" / "summary.json")).contains("cells"));
}

}  // namespace
}  // namespace dcafuse
