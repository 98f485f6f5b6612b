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

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loopformer/checkpoint.hpp"
#include "loopformer/config.hpp"
#include "loopformer/data.hpp"
#include "loopformer/loss.hpp"
#include "loopformer/model.hpp"
#include "loopformer/optim.hpp"

namespace loopformer {

// One line of the metrics stream. `r` is the recursion step the numbers
// describe; train rows average over the window since the previous event,
// eval rows cover the whole held-out slice at the current parameters.
struct MetricsRow {
  long step = 0;
  std::string split;
  int r = 1;
  double ce_raw = 0.0;
  double ce_adjusted = 0.0;
  double accuracy = 0.0;
  double degraded_fraction = 0.0;
};

inline std::string metrics_line(const MetricsRow& row) {
  nlohmann::ordered_json j{{"step", row.step},
                           {"split", row.split},
                           {"r", row.r},
                           {"ce_raw", row.ce_raw},
                           {"ce_adjusted", row.ce_adjusted},
                           {"accuracy", row.accuracy},
                           {"degraded_fraction", row.degraded_fraction}};
  return j.dump();
}

// Teacher-forced evaluation of `indices` at recursion depth `steps`. Metrics
// pool over all masked tokens: mean raw CE, mean CE after the configured
// penalty, argmax accuracy, and the fraction of tokens whose CE worsened
// against the previous step. Running more steps than the model trained with
// is allowed; the shared weights simply loop further.
template <typename Scalar>
std::vector<MetricsRow> evaluate(ModelParams<Scalar>& params, const TaskConfig& task,
                                 const LossConfig& loss_cfg,
                                 const std::vector<std::uint64_t>& indices, int steps) {
  if (indices.empty()) throw Error("evaluate: no samples");
  if (steps < 1) throw ConfigError("evaluate: steps must be >= 1");
  const int R = steps;
  std::vector<double> raw(R, 0.0), adj(R, 0.0), deg(R, 0.0), correct(R, 0.0);
  double tokens = 0.0;

  for (std::uint64_t idx : indices) {
    const MultimodalBatch<Scalar> batch = gen_sample<Scalar>(task, task.seed, idx);
    Tape<Scalar> t;
    auto graphs = recursive_forward(t, batch, params, R, false);
    std::vector<Mat<Scalar>> losses;
    losses.reserve(graphs.size());
    for (auto& g : graphs) losses.push_back(t.val(g.token_losses));

    for (int r = 0; r < R; ++r) {
      Mat<Scalar> adjusted = losses[static_cast<std::size_t>(r)];
      if (loss_cfg.variant == LossVariant::monotonic && r > 0) {
        adjusted = monotonic_adjust(losses[static_cast<std::size_t>(r)],
                                    losses[static_cast<std::size_t>(r - 1)],
                                    static_cast<Scalar>(loss_cfg.beta));
      }
      const Mat<Scalar>& logits = t.val(graphs[static_cast<std::size_t>(r)].logits);
      for (Eigen::Index i = 0; i < batch.n_text(); ++i) {
        if (!batch.loss_mask[static_cast<std::size_t>(i)]) continue;
        if (r == 0) tokens += 1.0;
        raw[static_cast<std::size_t>(r)] += losses[static_cast<std::size_t>(r)](i, 0);
        adj[static_cast<std::size_t>(r)] += adjusted(i, 0);
        if (r > 0 && losses[static_cast<std::size_t>(r)](i, 0) >
                         losses[static_cast<std::size_t>(r - 1)](i, 0)) {
          deg[static_cast<std::size_t>(r)] += 1.0;
        }
        Eigen::Index pred = 0;
        logits.row(i).maxCoeff(&pred);
        if (pred == batch.targets[static_cast<std::size_t>(i)]) {
          correct[static_cast<std::size_t>(r)] += 1.0;
        }
      }
    }
  }
  if (tokens == 0.0) throw Error("evaluate: no masked tokens in the slice");

  std::vector<MetricsRow> rows;
  rows.reserve(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    MetricsRow row;
    row.split = "eval";
    row.r = r + 1;
    row.ce_raw = raw[static_cast<std::size_t>(r)] / tokens;
    row.ce_adjusted = adj[static_cast<std::size_t>(r)] / tokens;
    row.accuracy = correct[static_cast<std::size_t>(r)] / tokens;
    row.degraded_fraction = deg[static_cast<std::size_t>(r)] / tokens;
    rows.push_back(std::move(row));
  }
  return rows;
}

struct TrainResult {
  ModelParams<float> params;
  std::vector<MetricsRow> metrics;
  std::vector<MetricsRow> final_eval;
  long steps_done = 0;
};

// Single-threaded optimization loop. Every batch builds one graph per sample
// and sweeps it; gradients land in the shared sinks, normalized by the
// batch-wide masked-token count, so the result is the exact batch mean no
// matter how the samples are partitioned. Eval fires at step 0, every
// eval_every updates, and at the end.
inline TrainResult train(const Config& cfg, std::ostream* metrics_stream = nullptr) {
  cfg.validate();
  TrainResult res;
  res.params = init_model<float>(cfg.model, cfg.train.seed);
  AdamW<float>::NamedParams named;
  visit_params(res.params, [&](const std::string& n, Param<float>& p) { named.emplace_back(n, &p); });
  AdamW<float> opt(cfg.train.optim);
  const Split split = make_split(cfg.task.seed, static_cast<std::uint64_t>(cfg.train.train_pool),
                                 static_cast<std::uint64_t>(cfg.train.eval_samples));
  const int R = cfg.model.recursion_steps;

  auto emit = [&](const MetricsRow& row) {
    if (metrics_stream) *metrics_stream << metrics_line(row) << "\n" << std::flush;
    res.metrics.push_back(row);
  };

  std::vector<double> w_raw(R, 0.0), w_adj(R, 0.0), w_deg(R, 0.0), w_acc(R, 0.0);
  long w_batches = 0;

  for (long step = 0;; ++step) {
    const bool last = step == cfg.train.steps;
    if (step % cfg.train.eval_every == 0 || last) {
      if (w_batches > 0) {
        for (int r = 0; r < R; ++r) {
          MetricsRow row;
          row.step = step;
          row.split = "train";
          row.r = r + 1;
          row.ce_raw = w_raw[static_cast<std::size_t>(r)] / w_batches;
          row.ce_adjusted = w_adj[static_cast<std::size_t>(r)] / w_batches;
          row.accuracy = w_acc[static_cast<std::size_t>(r)] / w_batches;
          row.degraded_fraction = w_deg[static_cast<std::size_t>(r)] / w_batches;
          emit(row);
        }
        std::fill(w_raw.begin(), w_raw.end(), 0.0);
        std::fill(w_adj.begin(), w_adj.end(), 0.0);
        std::fill(w_deg.begin(), w_deg.end(), 0.0);
        std::fill(w_acc.begin(), w_acc.end(), 0.0);
        w_batches = 0;
      }
      auto rows = evaluate(res.params, cfg.task, cfg.loss, split.eval, R);
      for (auto& row : rows) {
        row.step = step;
        emit(row);
      }
      res.final_eval = rows;
      log_debug("eval at step " + std::to_string(step) + ": ce_raw[last]=" +
                std::to_string(rows.back().ce_raw));
    }
    if (last) break;

    std::vector<MultimodalBatch<float>> batch;
    batch.reserve(static_cast<std::size_t>(cfg.train.batch));
    Eigen::Index masked_total = 0;
    for (int b = 0; b < cfg.train.batch; ++b) {
      const auto pos = static_cast<std::size_t>(
          (static_cast<unsigned long long>(step) * static_cast<unsigned long long>(cfg.train.batch) +
           static_cast<unsigned long long>(b)) %
          split.train.size());
      batch.push_back(gen_sample<float>(cfg.task, cfg.task.seed, split.train[pos]));
      for (std::uint8_t m : batch.back().loss_mask) masked_total += m ? 1 : 0;
    }
    if (masked_total == 0) throw Error("train: batch has no masked positions");

    for (auto& [name, p] : named) {
      (void)name;
      p->grad.setZero();
    }

    std::vector<double> b_raw(R, 0.0), b_adj(R, 0.0), b_deg(R, 0.0);
    std::vector<double> b_correct(R, 0.0);
    double loss_total = 0.0;
    try {
      for (const auto& sample : batch) {
        Tape<float> t;
        auto graphs = recursive_forward(t, sample, res.params, R, true);
        std::vector<Var<float>> step_losses;
        step_losses.reserve(graphs.size());
        for (auto& g : graphs) step_losses.push_back(g.token_losses);
        auto [total, breakdown] =
            total_loss(t, step_losses, sample.loss_mask, cfg.loss, masked_total);
        for (int r = 0; r < R; ++r) {
          b_raw[static_cast<std::size_t>(r)] += breakdown.per_step_raw[static_cast<std::size_t>(r)];
          b_adj[static_cast<std::size_t>(r)] +=
              breakdown.per_step_adjusted[static_cast<std::size_t>(r)];
          b_deg[static_cast<std::size_t>(r)] +=
              breakdown.degraded_fraction[static_cast<std::size_t>(r)];
          const Mat<float>& logits = t.val(graphs[static_cast<std::size_t>(r)].logits);
          for (Eigen::Index i = 0; i < sample.n_text(); ++i) {
            if (!sample.loss_mask[static_cast<std::size_t>(i)]) continue;
            Eigen::Index pred = 0;
            logits.row(i).maxCoeff(&pred);
            if (pred == sample.targets[static_cast<std::size_t>(i)]) {
              b_correct[static_cast<std::size_t>(r)] += 1.0;
            }
          }
        }
        loss_total += breakdown.total;
        t.backward(total);
      }
      if (!std::isfinite(loss_total)) throw NumericError("non-finite batch loss");
      opt.step(named, cosine_lr(cfg.train.optim.lr, step, cfg.train.steps));
    } catch (const NumericError& e) {
      throw NumericError("train: step " + std::to_string(step + 1) + ": " + e.what());
    }

    for (int r = 0; r < R; ++r) {
      w_raw[static_cast<std::size_t>(r)] += b_raw[static_cast<std::size_t>(r)];
      w_adj[static_cast<std::size_t>(r)] += b_adj[static_cast<std::size_t>(r)];
      w_deg[static_cast<std::size_t>(r)] += b_deg[static_cast<std::size_t>(r)];
      w_acc[static_cast<std::size_t>(r)] +=
          b_correct[static_cast<std::size_t>(r)] / static_cast<double>(masked_total);
    }
    w_batches += 1;
  }
  res.steps_done = cfg.train.steps;
  return res;
}

// Trains into a run directory with the standard layout: config.json,
// fingerprint.txt, metrics.jsonl (streamed), checkpoint/, and timing.json.
// Everything needed to reproduce or resume analysis of the run lives next to
// its outputs.
inline TrainResult train_run(const Config& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_config((fs::path(dir) / "config.json").string(), cfg);
  {
    std::ofstream fp(fs::path(dir) / "fingerprint.txt");
    if (!fp) throw IoError("train_run: cannot write into " + dir);
    fp << config_fingerprint(cfg) << "\n";
  }
  std::ofstream metrics(fs::path(dir) / "metrics.jsonl");
  if (!metrics) throw IoError("train_run: cannot open metrics stream in " + dir);

  const auto wall_start = std::chrono::steady_clock::now();
  const std::clock_t cpu_start = std::clock();
  TrainResult res = train(cfg, &metrics);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  const double cpu = static_cast<double>(std::clock() - cpu_start) / CLOCKS_PER_SEC;

  save_checkpoint((fs::path(dir) / "checkpoint").string(), res.params, cfg, res.steps_done);
  nlohmann::ordered_json timing{{"wall_seconds", wall}, {"cpu_seconds", cpu}};
  std::ofstream tf(fs::path(dir) / "timing.json");
  tf << timing.dump(2) << "\n";
  return res;
}

// Reads a metrics stream back and returns the eval rows of its last step.
inline std::vector<MetricsRow> load_final_eval(const std::string& metrics_path) {
  std::ifstream in(metrics_path);
  if (!in) throw IoError("load_final_eval: cannot open " + metrics_path);
  std::vector<MetricsRow> rows;
  long best_step = -1;
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("split") != "eval") continue;
    MetricsRow row;
    row.step = j.at("step").get<long>();
    row.split = "eval";
    row.r = j.at("r").get<int>();
    row.ce_raw = j.at("ce_raw").get<double>();
    row.ce_adjusted = j.at("ce_adjusted").get<double>();
    row.accuracy = j.at("accuracy").get<double>();
    row.degraded_fraction = j.at("degraded_fraction").get<double>();
    if (row.step > best_step) {
      best_step = row.step;
      rows.clear();
    }
    if (row.step == best_step) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("load_final_eval: no eval rows in " + metrics_path);
  return rows;
}

}  // namespace loopformer
