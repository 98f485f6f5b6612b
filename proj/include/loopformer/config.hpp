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
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include <json.hpp>

#include "loopformer/common.hpp"
#include "loopformer/data.hpp"
#include "loopformer/loss.hpp"
#include "loopformer/model.hpp"
#include "loopformer/optim.hpp"

namespace loopformer {

struct TrainConfig {
  long steps = 5000;
  int batch = 32;
  AdamWHyper optim;
  std::uint64_t seed = 0;
  long eval_every = 250;
  int eval_samples = 256;
  // Distinct training sample indices before the stream cycles; indices are
  // cheap (each one seeds a generator), so the default is a large pool.
  long train_pool = 200000;

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("train config: " + msg);
    };
    need(steps >= 0, "steps must be >= 0");
    need(batch >= 1, "batch must be >= 1");
    need(eval_every >= 1, "eval_every must be >= 1");
    need(eval_samples >= 1, "eval_samples must be >= 1");
    need(train_pool >= 1, "train_pool must be >= 1");
    optim.validate();
  }
};

// One run, fully determined: architecture, optimization, objective, data.
struct Config {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  TaskConfig task;

  void validate() const {
    model.validate();
    train.validate();
    loss.validate();
    task.validate();
    if (model.vocab < task.required_vocab()) {
      throw ConfigError("config: vocab " + std::to_string(model.vocab) +
                        " too small for task, needs " + std::to_string(task.required_vocab()));
    }
    if (model.patch_dim != task.patch_dim()) {
      throw ConfigError("config: model patch_dim " + std::to_string(model.patch_dim) +
                        " does not match task patch dim " + std::to_string(task.patch_dim()));
    }
  }
};

namespace detail {

// Strict object reader: unknown keys are config errors, not typos to skip.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: " + where_ + " must be a JSON object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      it->get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for " + where_ + "." + key + ": " + e.what());
    }
  }

  void field_str(const char* key, std::string& out) { field(key, out); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const char* k : seen_) known = known || it.key() == k;
      if (!known) throw ConfigError("config: unknown key '" + it.key() + "' in " + where_);
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::vector<const char*> seen_;
};

}  // namespace detail

inline Config config_from_json(const nlohmann::json& j) {
  Config cfg;
  detail::JsonReader top(j, "config");
  nlohmann::json sub;

  if (j.contains("model")) {
    detail::JsonReader r(j.at("model"), "model");
    r.field("vocab", cfg.model.vocab);
    r.field("dim", cfg.model.dim);
    r.field("n_layers", cfg.model.n_layers);
    r.field("n_heads", cfg.model.n_heads);
    r.field("mlp_ratio", cfg.model.mlp_ratio);
    r.field("patch_dim", cfg.model.patch_dim);
    r.field("recursion_steps", cfg.model.recursion_steps);
    r.field("connector_layers", cfg.model.connector_layers);
    r.field("connector_hidden", cfg.model.connector_hidden);
    std::string variant = to_string(cfg.model.connector_variant);
    r.field_str("connector_variant", variant);
    cfg.model.connector_variant = connector_variant_from(variant);
    r.field("shared_modality", cfg.model.shared_modality);
    r.field("rms_eps", cfg.model.rms_eps);
    r.field("rope_base", cfg.model.rope_base);
    r.finish();
  }
  if (j.contains("train")) {
    detail::JsonReader r(j.at("train"), "train");
    r.field("steps", cfg.train.steps);
    r.field("batch", cfg.train.batch);
    r.field("lr", cfg.train.optim.lr);
    r.field("beta1", cfg.train.optim.beta1);
    r.field("beta2", cfg.train.optim.beta2);
    r.field("eps", cfg.train.optim.eps);
    r.field("weight_decay", cfg.train.optim.weight_decay);
    r.field("clip_norm", cfg.train.optim.clip_norm);
    r.field("seed", cfg.train.seed);
    r.field("eval_every", cfg.train.eval_every);
    r.field("eval_samples", cfg.train.eval_samples);
    r.field("train_pool", cfg.train.train_pool);
    r.finish();
  }
  if (j.contains("loss")) {
    detail::JsonReader r(j.at("loss"), "loss");
    std::string variant = to_string(cfg.loss.variant);
    r.field_str("variant", variant);
    cfg.loss.variant = loss_variant_from(variant);
    r.field("beta", cfg.loss.beta);
    r.finish();
  }
  if (j.contains("task")) {
    detail::JsonReader r(j.at("task"), "task");
    std::string task = to_string(cfg.task.task);
    r.field_str("task", task);
    cfg.task.task = task_from(task);
    r.field("grid_size", cfg.task.grid_size);
    r.field("color_count", cfg.task.color_count);
    r.field("span_len", cfg.task.span_len);
    r.field("modulus", cfg.task.modulus);
    r.field("text_only", cfg.task.text_only);
    r.field("seed", cfg.task.seed);
    r.finish();
  }

  top.field("model", sub);
  top.field("train", sub);
  top.field("loss", sub);
  top.field("task", sub);
  top.finish();
  cfg.validate();
  return cfg;
}

// Canonical serialization: fixed key order, every field present. The
// fingerprint hashes exactly this form.
inline nlohmann::ordered_json config_to_json(const Config& cfg) {
  nlohmann::ordered_json j;
  j["model"] = {{"vocab", cfg.model.vocab},
                {"dim", cfg.model.dim},
                {"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},
                {"mlp_ratio", cfg.model.mlp_ratio},
                {"patch_dim", cfg.model.patch_dim},
                {"recursion_steps", cfg.model.recursion_steps},
                {"connector_layers", cfg.model.connector_layers},
                {"connector_hidden", cfg.model.connector_hidden},
                {"connector_variant", to_string(cfg.model.connector_variant)},
                {"shared_modality", cfg.model.shared_modality},
                {"rms_eps", cfg.model.rms_eps},
                {"rope_base", cfg.model.rope_base}};
  j["train"] = {{"steps", cfg.train.steps},
                {"batch", cfg.train.batch},
                {"lr", cfg.train.optim.lr},
                {"beta1", cfg.train.optim.beta1},
                {"beta2", cfg.train.optim.beta2},
                {"eps", cfg.train.optim.eps},
                {"weight_decay", cfg.train.optim.weight_decay},
                {"clip_norm", cfg.train.optim.clip_norm},
                {"seed", cfg.train.seed},
                {"eval_every", cfg.train.eval_every},
                {"eval_samples", cfg.train.eval_samples},
                {"train_pool", cfg.train.train_pool}};
  j["loss"] = {{"variant", to_string(cfg.loss.variant)}, {"beta", cfg.loss.beta}};
  j["task"] = {{"task", to_string(cfg.task.task)},
               {"grid_size", cfg.task.grid_size},
               {"color_count", cfg.task.color_count},
               {"span_len", cfg.task.span_len},
               {"modulus", cfg.task.modulus},
               {"text_only", cfg.task.text_only},
               {"seed", cfg.task.seed}};
  return j;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_fingerprint(const Config& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_json(cfg).dump())));
  return std::string(buf);
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const std::string& path, const Config& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot open " + path + " for writing");
  out << config_to_json(cfg).dump(2) << "\n";
  if (!out) throw IoError("config: write failed for " + path);
}

}  // namespace loopformer
