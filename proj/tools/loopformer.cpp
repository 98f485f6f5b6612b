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

// Command-line workbench: data generation, training, evaluation at a chosen
// recursion depth, representation diagnostics, the ablation matrix, and the
// finite-difference gradient check. Exit codes: 0 success, 1 configuration
// problem, 2 runtime failure; diagnostics go to standard error.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "loopformer/checkpoint.hpp"
#include "loopformer/config.hpp"
#include "loopformer/diagnostics.hpp"
#include "loopformer/fdsuite.hpp"
#include "loopformer/train.hpp"

namespace fs = std::filesystem;
namespace lf = loopformer;

namespace {

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw lf::IoError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw lf::IoError("write failed for " + path.string());
}

void write_fingerprint(const fs::path& dir, const lf::Config& cfg) {
  write_text(dir / "fingerprint.txt", lf::config_fingerprint(cfg) + "\n");
}

lf::Config load_or_default(const std::string& path) {
  return path.empty() ? lf::Config{} : lf::load_config(path);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream stream(s);
  while (std::getline(stream, item, ',')) {
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

long parse_long(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw lf::ConfigError("cannot parse '" + s + "' as " + what);
  }
}

void print_eval_table(const std::vector<lf::MetricsRow>& rows) {
  std::printf(" r   accuracy    ce_raw   ce_adjusted   degraded\n");
  for (const auto& row : rows) {
    std::printf("%2d   %8.4f  %8.4f   %11.4f   %8.4f\n", row.r, row.accuracy, row.ce_raw,
                row.ce_adjusted, row.degraded_fraction);
  }
}

struct TaskOverrides {
  std::string task;
  int grid_size = -1;
  int color_count = -1;
  int span_len = -1;
  int modulus = -1;
  int text_only = -1;

  void apply(lf::TaskConfig& t) const {
    if (!task.empty()) t.task = lf::task_from(task);
    if (grid_size > 0) t.grid_size = grid_size;
    if (color_count > 0) t.color_count = color_count;
    if (span_len > 0) t.span_len = span_len;
    if (modulus > 0) t.modulus = modulus;
    if (text_only >= 0) t.text_only = text_only != 0;
  }
};

int cmd_gen_data(const std::string& config_path, const std::string& out_path,
                 const std::string& split, long n, long long seed) {
  lf::Config cfg = load_or_default(config_path);
  if (seed >= 0) cfg.task.seed = static_cast<std::uint64_t>(seed);
  cfg.validate();
  if (n < 1) throw lf::ConfigError("gen-data: need --n >= 1");

  std::vector<std::uint64_t> indices;
  if (split == "train") {
    if (n > cfg.train.train_pool) {
      throw lf::ConfigError("gen-data: --n exceeds the train pool of " +
                            std::to_string(cfg.train.train_pool));
    }
    lf::Split s = lf::make_split(cfg.task.seed, static_cast<std::uint64_t>(n), 1);
    indices = s.train;
  } else {
    lf::Split s = lf::make_split(cfg.task.seed, static_cast<std::uint64_t>(cfg.train.train_pool),
                                 static_cast<std::uint64_t>(n));
    indices = s.eval;
  }
  lf::export_jsonl<double>(out_path, cfg.task, cfg.task.seed, indices);
  write_text(out_path + ".fingerprint", lf::config_fingerprint(cfg) + "\n");
  std::printf("wrote %ld %s samples to %s\n", n, split.c_str(), out_path.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, long long seed) {
  lf::Config cfg = lf::load_config(config_path);
  if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
  cfg.validate();
  lf::log_info("training run " + lf::config_fingerprint(cfg) + ": " +
               std::to_string(cfg.train.steps) + " steps, batch " +
               std::to_string(cfg.train.batch));
  const lf::TrainResult res = lf::train_run(cfg, out_dir);
  std::printf("final eval after %ld steps:\n", cfg.train.steps);
  print_eval_table(res.final_eval);
  std::printf("fingerprint: %s\n", lf::config_fingerprint(cfg).c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_dir, int eval_step, long n, bool allow_extrapolate,
             const TaskOverrides& overrides, const std::string& out_dir) {
  lf::LoadedCheckpoint ck = lf::load_checkpoint(ckpt_dir);
  overrides.apply(ck.config.task);
  ck.config.validate();

  const int trained = ck.config.model.recursion_steps;
  const int depth = eval_step > 0 ? eval_step : trained;
  if (depth > trained && !allow_extrapolate) {
    throw lf::ConfigError("eval: depth " + std::to_string(depth) +
                          " exceeds the trained depth " + std::to_string(trained) +
                          "; pass --allow-extrapolate to loop deeper");
  }
  const long count = n > 0 ? n : ck.config.train.eval_samples;
  lf::Split split = lf::make_split(ck.config.task.seed,
                                   static_cast<std::uint64_t>(ck.config.train.train_pool),
                                   static_cast<std::uint64_t>(count));
  auto rows = lf::evaluate(ck.params, ck.config.task, ck.config.loss, split.eval, depth);
  for (auto& row : rows) row.step = ck.step;

  std::printf("checkpoint at step %ld, trained depth %d, evaluated to depth %d, %ld samples:\n",
              ck.step, trained, depth, count);
  print_eval_table(rows);
  const std::string fingerprint = lf::config_fingerprint(ck.config);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::string lines;
    for (const auto& row : rows) lines += lf::metrics_line(row) + "\n";
    write_text(fs::path(out_dir) / "eval.jsonl", lines);
    write_fingerprint(out_dir, ck.config);
  }
  std::printf("fingerprint: %s\n", fingerprint.c_str());
  return 0;
}

int cmd_diagnose(const std::string& ckpt_dir, const std::string& out_dir, long samples,
                 long row_cap, int steps, long long subsample_seed) {
  lf::LoadedCheckpoint ck = lf::load_checkpoint(ckpt_dir);
  const int depth = steps > 0 ? steps : ck.config.model.recursion_steps;
  if (samples < 1) throw lf::ConfigError("diagnose: need --samples >= 1");

  lf::Split split = lf::make_split(ck.config.task.seed,
                                   static_cast<std::uint64_t>(ck.config.train.train_pool),
                                   static_cast<std::uint64_t>(samples));
  std::vector<lf::MultimodalBatch<float>> slice;
  slice.reserve(split.eval.size());
  for (std::uint64_t idx : split.eval) {
    slice.push_back(lf::gen_sample<float>(ck.config.task, ck.config.task.seed, idx));
  }
  const std::string fingerprint = lf::config_fingerprint(ck.config);
  auto reports = lf::run_diagnostics(ck.params, slice, depth, row_cap,
                                     static_cast<std::uint64_t>(subsample_seed), fingerprint);

  fs::create_directories(out_dir);
  nlohmann::ordered_json j;
  j["config_fingerprint"] = fingerprint;
  j["sample_count"] = reports.front().sample_count;
  j["reports"] = nlohmann::ordered_json::array();
  std::string csv = "layer_index,step,norm,cka\n";
  for (std::size_t r = 0; r < reports.size(); ++r) {
    nlohmann::ordered_json entry;
    entry["step"] = r + 1;
    entry["per_layer_norm"] = reports[r].per_layer_norm;
    entry["per_layer_cka"] = reports[r].per_layer_cka;
    j["reports"].push_back(entry);
    for (std::size_t l = 0; l < reports[r].per_layer_norm.size(); ++l) {
      csv += std::to_string(l) + "," + std::to_string(r + 1) + "," +
             std::to_string(reports[r].per_layer_norm[l]) + "," +
             std::to_string(reports[r].per_layer_cka[l]) + "\n";
    }
  }
  write_text(fs::path(out_dir) / "diagnostics.json", j.dump(2) + "\n");
  write_text(fs::path(out_dir) / "diagnostics.csv", csv);
  write_fingerprint(out_dir, ck.config);

  std::printf("step   input_norm   final_norm   final_cka\n");
  for (std::size_t r = 0; r < reports.size(); ++r) {
    std::printf("%4zu   %10.4f   %10.4f   %9.4f\n", r + 1, reports[r].per_layer_norm.front(),
                reports[r].per_layer_norm.back(), reports[r].per_layer_cka.back());
  }
  std::printf("fingerprint: %s\n", fingerprint.c_str());
  return 0;
}

int cmd_gradcheck(double eps) {
  auto cases = lf::run_fd_suite(eps);
  bool ok = true;
  std::printf("%-22s %-14s %s\n", "case", "max_rel_err", "worst_tensor");
  for (const auto& c : cases) {
    std::printf("%-22s %-14.3e %s\n", c.name.c_str(), c.report.max_rel_err,
                c.report.worst_tensor.c_str());
    ok = ok && c.report.max_rel_err < 1e-4;
  }
  std::printf("eps: %.1e\n", eps);
  if (!ok) throw lf::NumericError("gradient check exceeded 1e-4");
  std::printf("all gradients within 1e-4 of central differences\n");
  return 0;
}

struct ArmResult {
  std::string name;
  lf::Config config;
  fs::path dir;
  std::vector<lf::MetricsRow> eval;
  bool failed = false;
};

void run_arms_in_processes(std::vector<ArmResult>& arms, int parallel) {
  std::string self(64 << 10, '\0');
  const ssize_t len = ::readlink("/proc/self/exe", self.data(), self.size());
  if (len <= 0) throw lf::Error("ablate: cannot resolve own executable path");
  self.resize(static_cast<std::size_t>(len));

  std::size_t next = 0;
  while (next < arms.size()) {
    std::vector<std::pair<std::size_t, FILE*>> active;
    for (; next < arms.size() && static_cast<int>(active.size()) < parallel; ++next) {
      ArmResult& arm = arms[next];
      fs::create_directories(arm.dir);
      lf::save_config((arm.dir / "config.json").string(), arm.config);
      const std::string cmd = "'" + self + "' train --config '" +
                              (arm.dir / "config.json").string() + "' --out '" +
                              arm.dir.string() + "' > '" + (arm.dir / "log.txt").string() +
                              "' 2>&1";
      FILE* child = ::popen(cmd.c_str(), "r");
      if (child == nullptr) throw lf::Error("ablate: failed to launch worker for " + arm.name);
      active.emplace_back(next, child);
      lf::log_info("ablate: launched " + arm.name);
    }
    for (auto& [i, child] : active) {
      const int status = ::pclose(child);
      arms[i].failed = !(WIFEXITED(status) && WEXITSTATUS(status) == 0);
      if (arms[i].failed) {
        lf::log_error("ablate: arm " + arms[i].name + " failed; see " +
                      (arms[i].dir / "log.txt").string());
      }
    }
  }
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               const std::string& seeds_str, const std::string& recursions_str,
               const std::string& losses_str, const std::string& variants_str, int parallel) {
  lf::Config base = load_or_default(config_path);
  base.validate();
  if (parallel < 1) throw lf::ConfigError("ablate: --parallel must be >= 1");

  std::vector<long> seeds;
  for (const auto& s : split_csv(seeds_str.empty() ? "0" : seeds_str)) {
    seeds.push_back(parse_long(s, "a seed"));
  }
  std::vector<int> recursions;
  if (recursions_str.empty()) {
    recursions.push_back(base.model.recursion_steps);
  } else {
    for (const auto& s : split_csv(recursions_str)) {
      recursions.push_back(static_cast<int>(parse_long(s, "a recursion depth")));
    }
  }
  std::vector<lf::LossVariant> losses;
  if (losses_str.empty()) {
    losses.push_back(base.loss.variant);
  } else {
    for (const auto& s : split_csv(losses_str)) losses.push_back(lf::loss_variant_from(s));
  }
  std::vector<lf::ConnectorVariant> variants;
  if (variants_str.empty()) {
    variants.push_back(base.model.connector_variant);
  } else {
    for (const auto& s : split_csv(variants_str)) {
      variants.push_back(lf::connector_variant_from(s));
    }
  }

  std::vector<ArmResult> arms;
  for (int rec : recursions) {
    for (lf::LossVariant loss : losses) {
      for (lf::ConnectorVariant variant : variants) {
        for (long seed : seeds) {
          ArmResult arm;
          arm.config = base;
          arm.config.model.recursion_steps = rec;
          arm.config.loss.variant = loss;
          arm.config.model.connector_variant = variant;
          arm.config.train.seed = static_cast<std::uint64_t>(seed);
          arm.config.task.seed = static_cast<std::uint64_t>(seed);
          arm.config.validate();
          arm.name = "r" + std::to_string(rec) + "_" + lf::to_string(loss) + "_" +
                     lf::to_string(variant) + "_s" + std::to_string(seed);
          arm.dir = fs::path(out_dir) / arm.name;
          arms.push_back(std::move(arm));
        }
      }
    }
  }
  lf::log_info("ablate: " + std::to_string(arms.size()) + " runs");
  fs::create_directories(out_dir);

  if (parallel == 1) {
    for (auto& arm : arms) {
      lf::log_info("ablate: running " + arm.name);
      arm.eval = lf::train_run(arm.config, arm.dir.string()).final_eval;
    }
  } else {
    run_arms_in_processes(arms, parallel);
    for (auto& arm : arms) {
      if (!arm.failed) arm.eval = lf::load_final_eval((arm.dir / "metrics.jsonl").string());
    }
  }

  int max_r = 0;
  for (const auto& arm : arms) {
    for (const auto& row : arm.eval) max_r = std::max(max_r, row.r);
  }
  std::size_t name_width = 4;
  for (const auto& arm : arms) name_width = std::max(name_width, arm.name.size());

  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  std::printf("%-*s", static_cast<int>(name_width + 2), "arm");
  for (int r = 1; r <= max_r; ++r) std::printf("  acc@%d   ", r);
  for (int r = 1; r <= max_r; ++r) std::printf("  ce@%d    ", r);
  std::printf("\n");
  for (const auto& arm : arms) {
    std::printf("%-*s", static_cast<int>(name_width + 2), arm.name.c_str());
    nlohmann::ordered_json entry;
    entry["arm"] = arm.name;
    entry["recursion_steps"] = arm.config.model.recursion_steps;
    entry["loss"] = lf::to_string(arm.config.loss.variant);
    entry["connector_variant"] = lf::to_string(arm.config.model.connector_variant);
    entry["seed"] = arm.config.train.seed;
    entry["fingerprint"] = lf::config_fingerprint(arm.config);
    entry["failed"] = arm.failed;
    entry["eval"] = nlohmann::ordered_json::array();
    for (int r = 1; r <= max_r; ++r) {
      const lf::MetricsRow* row = nullptr;
      for (const auto& candidate : arm.eval) {
        if (candidate.r == r) row = &candidate;
      }
      if (row != nullptr) {
        std::printf("  %7.4f", row->accuracy);
      } else {
        std::printf("  %7s", "-");
      }
    }
    for (int r = 1; r <= max_r; ++r) {
      const lf::MetricsRow* row = nullptr;
      for (const auto& candidate : arm.eval) {
        if (candidate.r == r) row = &candidate;
      }
      if (row != nullptr) {
        std::printf("  %7.4f", row->ce_raw);
      } else {
        std::printf("  %7s", "-");
      }
    }
    std::printf("\n");
    for (const auto& row : arm.eval) {
      entry["eval"].push_back(nlohmann::ordered_json::parse(lf::metrics_line(row)));
    }
    summary.push_back(entry);
  }
  write_text(fs::path(out_dir) / "ablate.json", summary.dump(2) + "\n");
  write_fingerprint(out_dir, base);
  std::printf("fingerprint: %s\n", lf::config_fingerprint(base).c_str());

  for (const auto& arm : arms) {
    if (arm.failed) throw lf::Error("ablate: arm " + arm.name + " failed");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"recursive multimodal transformer workbench"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "export task samples as JSONL");
  std::string gen_config, gen_out, gen_split = "eval";
  long gen_n = 64;
  long long gen_seed = -1;
  gen->add_option("--config", gen_config, "run config JSON (defaults used when absent)");
  gen->add_option("--out", gen_out, "output .jsonl path")->required();
  gen->add_option("--split", gen_split, "train or eval slice")
      ->check(CLI::IsMember({"train", "eval"}));
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--seed", gen_seed, "override the task seed");

  auto* tr = app.add_subcommand("train", "train a model and write checkpoint plus metrics");
  std::string tr_config, tr_out;
  long long tr_seed = -1;
  tr->add_option("--config", tr_config, "run config JSON")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--seed", tr_seed, "override the training seed");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint at a chosen recursion depth");
  std::string ev_ckpt, ev_out;
  int ev_step = -1;
  long ev_n = -1;
  bool ev_extrapolate = false;
  TaskOverrides ev_task;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--eval-step", ev_step, "deepest recursion step to report");
  ev->add_option("--n", ev_n, "held-out sample count");
  ev->add_flag("--allow-extrapolate", ev_extrapolate,
               "permit depths beyond the trained recursion");
  ev->add_option("--out", ev_out, "directory for machine-readable results");
  ev->add_option("--task", ev_task.task, "override the task name");
  ev->add_option("--grid-size", ev_task.grid_size, "override the grid size");
  ev->add_option("--color-count", ev_task.color_count, "override the color count");
  ev->add_option("--span-len", ev_task.span_len, "override the copy span");
  ev->add_option("--modulus", ev_task.modulus, "override the value alphabet");
  ev->add_option("--text-only", ev_task.text_only, "1 drops vision tokens, 0 keeps them");

  auto* di = app.add_subcommand("diagnose", "layer norms and input alignment per step");
  std::string di_ckpt, di_out;
  long di_samples = 64, di_row_cap = 4096;
  int di_steps = -1;
  long long di_subseed = 0;
  di->add_option("--ckpt", di_ckpt, "checkpoint directory")->required();
  di->add_option("--out", di_out, "output directory")->required();
  di->add_option("--samples", di_samples, "held-out samples to pool");
  di->add_option("--row-cap", di_row_cap, "token rows kept for alignment scores");
  di->add_option("--steps", di_steps, "recursion depth to trace");
  di->add_option("--subsample-seed", di_subseed, "seed for the token subsample");

  auto* ab = app.add_subcommand("ablate", "train a grid of arms and summarize");
  std::string ab_config, ab_out, ab_seeds, ab_recs, ab_losses, ab_variants;
  int ab_parallel = 1;
  ab->add_option("--config", ab_config, "base run config JSON");
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--seeds", ab_seeds, "comma list of seeds (default 0)");
  ab->add_option("--recursions", ab_recs, "comma list of recursion depths");
  ab->add_option("--losses", ab_losses, "comma list of loss variants");
  ab->add_option("--variants", ab_variants, "comma list of connector variants");
  ab->add_option("--parallel", ab_parallel, "worker processes");

  auto* gc = app.add_subcommand("gradcheck", "compare gradients against central differences");
  double gc_eps = 1e-5;
  gc->add_option("--eps", gc_eps, "finite-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_config, gen_out, gen_split, gen_n, gen_seed);
    if (tr->parsed()) return cmd_train(tr_config, tr_out, tr_seed);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_step, ev_n, ev_extrapolate, ev_task, ev_out);
    if (di->parsed()) return cmd_diagnose(di_ckpt, di_out, di_samples, di_row_cap, di_steps,
                                          di_subseed);
    if (ab->parsed()) {
      return cmd_ablate(ab_config, ab_out, ab_seeds, ab_recs, ab_losses, ab_variants,
                        ab_parallel);
    }
    if (gc->parsed()) return cmd_gradcheck(gc_eps);
  } catch (const lf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const lf::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
