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

// Parameter checkpoints: one tensor file per learnable tensor plus a
// manifest.json listing {name, shape, file} in visiting order. Works for any
// parameter struct exposing for_each(name, tensor).

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"

#include "dcafuse/tensor.hpp"

namespace dcafuse {

/// Writes every tensor of `params` under `dir`. `meta` is stored verbatim.
template <class Params>
void save_checkpoint(const std::filesystem::path& dir, Params& params, const nlohmann::json& meta = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  params.for_each([&](const std::string& name, Tensor& t) {
    const std::string file = name + ".tensor";
    save_tensor(dir / file, t);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  });
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
  os << nlohmann::json{{"meta", meta}, {"tensors", entries}}.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("checkpoint: missing manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest is not JSON: ") + e.what());
  }
}

/// Fills `params` (already shaped, e.g. by an init call) from `dir`. The
/// manifest must list exactly the tensors of `params` with matching shapes.
template <class Params>
void load_checkpoint(const std::filesystem::path& dir, Params& params) {
  const nlohmann::json m = read_checkpoint_manifest(dir);
  if (!m.contains("tensors") || !m["tensors"].is_array()) throw FormatError("checkpoint: manifest lacks a tensors array");
  std::map<std::string, nlohmann::json> by_name;
  for (const auto& e : m["tensors"]) {
    if (!e.contains("name") || !e.contains("file") || !e.contains("shape")) {
      throw FormatError("checkpoint: manifest entry needs name, shape and file");
    }
    by_name[e["name"].get<std::string>()] = e;
  }
  std::size_t used = 0;
  params.for_each([&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: tensor '" + name + "' missing from manifest");
    Tensor loaded = load_tensor(dir / it->second["file"].get<std::string>());
    if (loaded.shape() != t.shape() || it->second["shape"].get<std::vector<std::size_t>>() != t.shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + detail::shape_str(loaded.shape()) +
                        ", expected " + detail::shape_str(t.shape()));
    }
    t = std::move(loaded);
    ++used;
  });
  if (used != by_name.size()) throw FormatError("checkpoint: manifest lists tensors the model does not have");
}

}  // namespace dcafuse
