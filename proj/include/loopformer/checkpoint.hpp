// Copyright 2026 The Loopformer Authors
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

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loopformer/config.hpp"
#include "loopformer/model.hpp"

namespace loopformer {

// Checkpoints are a directory so every part stays inspectable with ordinary
// tools: manifest.json lists tensors with byte offsets into tensors.bin
// (little-endian 32-bit floats, row-major), config.json restores the run
// configuration. A saved directory loads back and saves byte-identically.

// Everything needed to re-run the model, in manifest order. The frozen patch
// projector is included right after the embedding: it never trains but the
// function is not reconstructible without it.
template <typename Scalar>
std::vector<std::pair<std::string, Mat<Scalar>*>> persisted_tensors(ModelParams<Scalar>& p) {
  std::vector<std::pair<std::string, Mat<Scalar>*>> out;
  visit_params(p, [&](const std::string& name, Param<Scalar>& param) {
    out.emplace_back(name, &param.value);
  });
  out.insert(out.begin() + 1, {std::string("patch_projector"), &p.patch_projector});
  return out;
}

inline void save_checkpoint(const std::string& dir, ModelParams<float>& params,
                            const Config& config, long step) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint blob layout assumes a little-endian host");
  std::filesystem::create_directories(dir);
  auto tensors = persisted_tensors(params);

  nlohmann::ordered_json manifest;
  manifest["format"] = "loopformer-checkpoint-v1";
  manifest["step"] = step;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (auto& [name, mat] : tensors) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = {mat->rows(), mat->cols()};
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    list.push_back(entry);
    offset += static_cast<std::uint64_t>(mat->size()) * sizeof(float);
  }
  manifest["tensors"] = list;
  manifest["total_bytes"] = offset;

  const auto path = std::filesystem::path(dir);
  {
    std::ofstream blob(path / "tensors.bin", std::ios::binary);
    if (!blob) throw IoError("checkpoint: cannot open " + (path / "tensors.bin").string());
    for (auto& [name, mat] : tensors) {
      (void)name;
      blob.write(reinterpret_cast<const char*>(mat->data()),
                 static_cast<std::streamsize>(mat->size() * sizeof(float)));
    }
    if (!blob) throw IoError("checkpoint: write failed for tensors.bin");
  }
  {
    std::ofstream out(path / "manifest.json");
    if (!out) throw IoError("checkpoint: cannot open " + (path / "manifest.json").string());
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("checkpoint: write failed for manifest.json");
  }
  save_config((path / "config.json").string(), config);
}

struct LoadedCheckpoint {
  ModelParams<float> params;
  Config config;
  long step = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& dir) {
  const auto path = std::filesystem::path(dir);
  nlohmann::json manifest;
  {
    std::ifstream in(path / "manifest.json");
    if (!in) throw IoError("checkpoint: cannot open " + (path / "manifest.json").string());
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("checkpoint: corrupt manifest.json: " + std::string(e.what()));
    }
  }
  if (manifest.value("format", "") != "loopformer-checkpoint-v1") {
    throw IoError("checkpoint: unrecognized manifest format");
  }

  LoadedCheckpoint ck;
  ck.config = load_config((path / "config.json").string());
  ck.step = manifest.at("step").get<long>();
  // A seed-zero shell gives the right shapes; every tensor below is
  // overwritten from the blob.
  ck.params = init_model<float>(ck.config.model, 0);
  auto tensors = persisted_tensors(ck.params);

  const auto& list = manifest.at("tensors");
  if (list.size() != tensors.size()) {
    throw Error("checkpoint: manifest lists " + std::to_string(list.size()) +
                " tensors, model expects " + std::to_string(tensors.size()));
  }
  std::uint64_t expect_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = list[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != tensors[i].first) {
      throw Error("checkpoint: manifest tensor '" + name + "' where model expects '" +
                  tensors[i].first + "'");
    }
    if (entry.at("dtype").get<std::string>() != "f32") {
      throw Error("checkpoint: tensor '" + name + "' has dtype " +
                  entry.at("dtype").get<std::string>() + ", expected f32");
    }
    const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
    Mat<float>& mat = *tensors[i].second;
    if (shape.size() != 2 || shape[0] != mat.rows() || shape[1] != mat.cols()) {
      throw ShapeError("checkpoint: tensor '" + name + "' has shape mismatch against config");
    }
    if (entry.at("offset").get<std::uint64_t>() != expect_offset) {
      throw Error("checkpoint: tensor '" + name + "' has inconsistent offset");
    }
    expect_offset += static_cast<std::uint64_t>(mat.size()) * sizeof(float);
  }
  if (manifest.at("total_bytes").get<std::uint64_t>() != expect_offset) {
    throw Error("checkpoint: manifest total_bytes disagrees with tensor list");
  }

  std::ifstream blob(path / "tensors.bin", std::ios::binary);
  if (!blob) throw IoError("checkpoint: cannot open " + (path / "tensors.bin").string());
  blob.seekg(0, std::ios::end);
  const auto actual = static_cast<std::uint64_t>(blob.tellg());
  if (actual != expect_offset) {
    throw Error("checkpoint: tensors.bin has " + std::to_string(actual) +
                " bytes, manifest expects " + std::to_string(expect_offset));
  }
  blob.seekg(0);
  for (auto& [name, mat] : tensors) {
    blob.read(reinterpret_cast<char*>(mat->data()),
              static_cast<std::streamsize>(mat->size() * sizeof(float)));
    if (!blob) throw IoError("checkpoint: short read in tensors.bin at '" + name + "'");
  }
  return ck;
}

}  // namespace loopformer
