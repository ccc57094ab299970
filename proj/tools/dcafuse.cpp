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

// dcafuse <gradcheck|train|robustness|genscene> --config <path> --out <dir>
//         [--overwrite] [--threads <n>] [--seed <u64>]

#include <iostream>

#include "CLI11.hpp"

#include "dcafuse/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Dynamic cross attention LiDAR-camera fusion: gradient checks, training and robustness experiments"};
  app.require_subcommand(1);
  dcafuse::CliOptions opt;
  std::size_t threads = 0;
  std::uint64_t seed = 0;

  const std::pair<const char*, dcafuse::Command> commands[] = {
      {"gradcheck", dcafuse::Command::gradcheck},
      {"train", dcafuse::Command::train},
      {"robustness", dcafuse::Command::robustness},
      {"genscene", dcafuse::Command::genscene},
  };
  const char* help[] = {"finite-difference check of every analytic backward pass",
                        "train one fusion model; writes a checkpoint and history CSV",
                        "run the calibration-disturbance grid; writes CSV and JSON summary",
                        "generate and save one synthetic scene"};
  for (std::size_t i = 0; i < 4; ++i) {
    CLI::App* sub = app.add_subcommand(commands[i].first, help[i]);
    sub->add_option("--config", opt.config, "JSON run config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory (created atomically)")->required();
    sub->add_flag("--overwrite", opt.overwrite, "replace an existing output directory");
    sub->add_option("--threads", threads, "worker threads (default: $DCAFUSE_THREADS, then config)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "top-level seed, overrides the config");
    sub->callback([&opt, cmd = commands[i].second] { opt.command = cmd; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : dcafuse::kExitUsage;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    if (sub->count("--threads")) opt.threads = threads;
    if (sub->count("--seed")) opt.seed = seed;
  }
  return dcafuse::run_command(opt, std::cout, std::cerr);
}
