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

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopformer/model.hpp"
#include "loopformer/rng.hpp"

namespace loopformer {

// Tasks: grid_color asks for the color of one cell of a synthetic image and
// is solvable only through the vision tokens; copy and modadd are text-only
// controls.
enum class Task { grid_color, copy, modadd };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::grid_color: return "grid_color";
    case Task::copy: return "copy";
    case Task::modadd: return "modadd";
  }
  return "unknown";
}

inline Task task_from(const std::string& s) {
  if (s == "grid_color") return Task::grid_color;
  if (s == "copy") return Task::copy;
  if (s == "modadd") return Task::modadd;
  throw ConfigError("unknown task '" + s + "'");
}

// Shared vocab layout: four specials, then task value tokens. grid_color
// uses color tokens followed by cell-position tokens; copy and modadd use a
// flat value alphabet.
struct TaskConfig {
  Task task = Task::grid_color;
  int grid_size = 4;    // G; the image is G x G cells
  int color_count = 8;  // C
  int span_len = 4;     // copy: tokens echoed after the separator
  int modulus = 17;     // copy alphabet size / modadd modulus
  bool text_only = false;  // ablation: drop the vision tokens entirely
  std::uint64_t seed = 0;

  static constexpr int kBos = 0;
  static constexpr int kSep = 1;
  static constexpr int kAnswer = 2;
  static constexpr int kPad = 3;
  static constexpr int kValueBase = 4;

  int value_count() const {
    switch (task) {
      case Task::grid_color: return color_count + grid_size * grid_size;
      case Task::copy: return modulus;
      case Task::modadd: return modulus;
    }
    return 0;
  }
  int required_vocab() const { return kValueBase + value_count(); }
  // One-hot color plus one-hot row and column codes.
  int patch_dim() const {
    return task == Task::grid_color ? color_count + 2 * grid_size : 1;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("task config: " + msg);
    };
    need(grid_size >= 1, "grid_size must be >= 1");
    need(color_count >= 1, "color_count must be >= 1");
    need(span_len >= 1, "span_len must be >= 1");
    need(modulus >= 1, "modulus must be >= 1");
  }
};

namespace detail {

inline Rng sample_rng(const TaskConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t task_tag = 11 + static_cast<std::uint64_t>(cfg.task);
  return Rng(mix64(mix64(seed, task_tag), index));
}

}  // namespace detail

// Every generator is a pure function of (config, seed, index): the same
// triple reproduces the same sample bit for bit. Targets are the next-token
// shift of the text; positions outside the answer span carry PAD and a
// false mask bit.
template <typename Scalar>
MultimodalBatch<Scalar> gen_grid_color(const TaskConfig& cfg, std::uint64_t seed,
                                       std::uint64_t index) {
  cfg.validate();
  Rng rng = detail::sample_rng(cfg, seed, index);
  const int g = cfg.grid_size;
  const int cells = g * g;

  std::vector<int> colors(static_cast<std::size_t>(cells));
  for (int& c : colors) c = rng.below_int(cfg.color_count);
  const int query = rng.below_int(cells);

  MultimodalBatch<Scalar> b;
  if (cfg.text_only) {
    b.raw_patches = Mat<Scalar>(0, cfg.patch_dim());
  } else {
    b.raw_patches = Mat<Scalar>::Zero(cells, cfg.patch_dim());
    for (int i = 0; i < cells; ++i) {
      b.raw_patches(i, colors[static_cast<std::size_t>(i)]) = Scalar(1);
      b.raw_patches(i, cfg.color_count + i / g) = Scalar(1);
      b.raw_patches(i, cfg.color_count + g + i % g) = Scalar(1);
    }
  }

  const int pos_token = TaskConfig::kValueBase + cfg.color_count + query;
  const int color_token = TaskConfig::kValueBase + colors[static_cast<std::size_t>(query)];
  b.text_ids = {TaskConfig::kBos, pos_token, TaskConfig::kAnswer, color_token};
  b.targets = {TaskConfig::kPad, TaskConfig::kPad, color_token, TaskConfig::kPad};
  b.loss_mask = {0, 0, 1, 0};
  return b;
}

template <typename Scalar>
MultimodalBatch<Scalar> gen_copy(const TaskConfig& cfg, std::uint64_t seed,
                                 std::uint64_t index) {
  cfg.validate();
  Rng rng = detail::sample_rng(cfg, seed, index);
  const int k = cfg.span_len;
  std::vector<int> span(static_cast<std::size_t>(k));
  for (int& v : span) v = TaskConfig::kValueBase + rng.below_int(cfg.modulus);

  MultimodalBatch<Scalar> b;
  b.raw_patches = Mat<Scalar>(0, cfg.patch_dim());
  b.text_ids.push_back(TaskConfig::kBos);
  b.text_ids.insert(b.text_ids.end(), span.begin(), span.end());
  b.text_ids.push_back(TaskConfig::kSep);
  b.text_ids.insert(b.text_ids.end(), span.begin(), span.end());

  const std::size_t n = b.text_ids.size();
  b.targets.assign(n, TaskConfig::kPad);
  b.loss_mask.assign(n, 0);
  // Positions from the separator up to the second-to-last echo token each
  // predict the next echo token.
  for (std::size_t i = static_cast<std::size_t>(k) + 1; i + 1 < n; ++i) {
    b.targets[i] = b.text_ids[i + 1];
    b.loss_mask[i] = 1;
  }
  return b;
}

template <typename Scalar>
MultimodalBatch<Scalar> gen_modadd(const TaskConfig& cfg, std::uint64_t seed,
                                   std::uint64_t index) {
  cfg.validate();
  Rng rng = detail::sample_rng(cfg, seed, index);
  const int a = rng.below_int(cfg.modulus);
  const int b_val = rng.below_int(cfg.modulus);
  const int c = (a + b_val) % cfg.modulus;

  MultimodalBatch<Scalar> b;
  b.raw_patches = Mat<Scalar>(0, cfg.patch_dim());
  b.text_ids = {TaskConfig::kBos, TaskConfig::kValueBase + a, TaskConfig::kValueBase + b_val,
                TaskConfig::kAnswer, TaskConfig::kValueBase + c};
  b.targets = {TaskConfig::kPad, TaskConfig::kPad, TaskConfig::kPad,
               TaskConfig::kValueBase + c, TaskConfig::kPad};
  b.loss_mask = {0, 0, 0, 1, 0};
  return b;
}

template <typename Scalar>
MultimodalBatch<Scalar> gen_sample(const TaskConfig& cfg, std::uint64_t seed,
                                   std::uint64_t index) {
  switch (cfg.task) {
    case Task::grid_color: return gen_grid_color<Scalar>(cfg, seed, index);
    case Task::copy: return gen_copy<Scalar>(cfg, seed, index);
    case Task::modadd: return gen_modadd<Scalar>(cfg, seed, index);
  }
  throw ConfigError("gen_sample: unknown task");
}

// Train indices precede eval indices; generators make index streams
// independent, so contiguous disjoint ranges are a valid split.
struct Split {
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> eval;
};

inline Split make_split(std::uint64_t seed, std::uint64_t n_train, std::uint64_t n_eval) {
  (void)seed;  // samples already mix the seed; the split is positional
  if (n_train < 1 || n_eval < 1) throw ConfigError("make_split: need n_train, n_eval >= 1");
  Split s;
  s.train.reserve(n_train);
  s.eval.reserve(n_eval);
  for (std::uint64_t i = 0; i < n_train; ++i) s.train.push_back(i);
  for (std::uint64_t i = 0; i < n_eval; ++i) s.eval.push_back(n_train + i);
  return s;
}

// One JSON object per line, fields mirroring the sample struct.
template <typename Scalar>
void export_jsonl(const std::string& path, const TaskConfig& cfg, std::uint64_t seed,
                  const std::vector<std::uint64_t>& indices) {
  std::ofstream out(path);
  if (!out) throw IoError("export_jsonl: cannot open " + path);
  for (std::uint64_t idx : indices) {
    MultimodalBatch<Scalar> b = gen_sample<Scalar>(cfg, seed, idx);
    nlohmann::json j;
    j["index"] = idx;
    std::vector<std::vector<double>> patches;
    for (Eigen::Index i = 0; i < b.raw_patches.rows(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(b.raw_patches.cols()));
      for (Eigen::Index k = 0; k < b.raw_patches.cols(); ++k) {
        row[static_cast<std::size_t>(k)] = static_cast<double>(b.raw_patches(i, k));
      }
      patches.push_back(std::move(row));
    }
    j["raw_patches"] = patches;
    j["text_ids"] = b.text_ids;
    j["targets"] = b.targets;
    j["loss_mask"] = std::vector<int>(b.loss_mask.begin(), b.loss_mask.end());
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("export_jsonl: write failed for " + path);
}

}  // namespace loopformer
