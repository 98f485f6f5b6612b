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

#include <string>
#include <utility>
#include <vector>

#include "loopformer/gradcheck.hpp"
#include "loopformer/loss.hpp"
#include "loopformer/model.hpp"

namespace loopformer {

struct FdCase {
  std::string name;
  FdNamedReport report;
};

namespace detail {

// Six tokens total: two projected patches ahead of a four-token prompt, with
// the loss masked onto two prediction positions.
inline MultimodalBatch<double> fd_toy_batch() {
  MultimodalBatch<double> b;
  Rng rng(mix64(404, 1));
  b.raw_patches = rng.normal_matrix<double>(2, 3, 0.8);
  b.text_ids = {0, 4, 2, 5};
  b.targets = {3, 5, 5, 3};
  b.loss_mask = {0, 1, 1, 0};
  return b;
}

inline ModelConfig fd_tiny_config() {
  ModelConfig cfg;
  cfg.vocab = 8;
  cfg.dim = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.patch_dim = 3;
  cfg.recursion_steps = 2;
  cfg.connector_layers = 2;
  cfg.connector_hidden = 8;
  return cfg;
}

// Initialization leaves connectors at their do-nothing zero point and the
// backbone so small that deep-layer gradients sink to the 1e-9 scale, where
// central differences are dominated by rounding. Both checks below move the
// parameters to a generic position first so every path carries real signal.
template <typename Visitable>
void fd_scramble(Visitable& target, std::uint64_t seed) {
  Rng rng(mix64(seed, 77));
  visit_params(target, [&](const std::string&, Param<double>& p) {
    p.value += rng.normal_matrix<double>(p.value.rows(), p.value.cols(), 0.15);
  });
}

}  // namespace detail

// Three verification targets of increasing scope: a lone decoder block, a
// lone connector at a generic parameter point, and the whole two-step
// recursion scored by the degradation-penalized objective. Each compares
// every parameter coordinate against central differences.
inline std::vector<FdCase> run_fd_suite(double eps) {
  std::vector<FdCase> cases;

  {
    ModelConfig cfg = detail::fd_tiny_config();
    cfg.n_layers = 1;
    cfg.recursion_steps = 1;
    ModelParams<double> model = init_model<double>(cfg, 5);
    Rng rng(mix64(5, 99));
    const MatD input = rng.normal_matrix<double>(6, cfg.dim, 0.5);

    std::vector<std::pair<std::string, Param<double>*>> params;
    visit_params(model, [&](const std::string& name, Param<double>& p) {
      if (name.rfind("block.", 0) == 0) params.emplace_back(name, &p);
    });
    auto run = [&](bool with_grad) {
      Tape<double> t;
      auto hidden = decoder_forward(t, t.leaf(input), model, with_grad);
      Var<double> obj = sum_all(cmul(hidden.back(), hidden.back()));
      const double value = t.val(obj)(0, 0);
      if (with_grad) t.backward(obj);
      return value;
    };
    cases.push_back({"decoder_block", fd_check_params<double>(params, run, eps)});
  }

  {
    const Eigen::Index d = 8, h = 8;
    ConnectorBank<double> bank;
    bank.layers = {1};
    bank.variant = ConnectorVariant::full;
    Rng init_rng(mix64(6, 1));
    init_connectors(bank, d, h, init_rng);
    detail::fd_scramble(bank, 6);
    ConnectorParams<double>& cp = bank.vision[0];

    Rng rng(mix64(6, 2));
    const MatD slice = rng.normal_matrix<double>(5, d, 0.7);
    std::vector<std::pair<std::string, Param<double>*>> params{
        {"rms_gain", &cp.rms_gain},
        {"scale_s", &cp.scale_s},
        {"w_up", &cp.w_up},
        {"w_down", &cp.w_down}};
    auto run = [&](bool with_grad) {
      Tape<double> t;
      Var<double> out =
          connector_apply(t, t.leaf(slice), cp, ConnectorVariant::full, 1e-6, with_grad);
      Var<double> obj = sum_all(cmul(out, out));
      const double value = t.val(obj)(0, 0);
      if (with_grad) t.backward(obj);
      return value;
    };
    cases.push_back({"connector", fd_check_params<double>(params, run, eps)});
  }

  {
    ModelParams<double> model = init_model<double>(detail::fd_tiny_config(), 7);
    detail::fd_scramble(model, 7);
    const MultimodalBatch<double> batch = detail::fd_toy_batch();
    LossConfig loss_cfg;

    std::vector<std::pair<std::string, Param<double>*>> params;
    visit_params(model, [&](const std::string& name, Param<double>& p) {
      params.emplace_back(name, &p);
    });
    auto run = [&](bool with_grad) {
      Tape<double> t;
      auto graphs = recursive_forward(t, batch, model, 2, with_grad);
      std::vector<Var<double>> losses;
      for (auto& g : graphs) losses.push_back(g.token_losses);
      auto [total, breakdown] = total_loss(t, losses, batch.loss_mask, loss_cfg);
      (void)breakdown;
      const double value = t.val(total)(0, 0);
      if (with_grad) t.backward(total);
      return value;
    };
    cases.push_back({"recursive_monotonic", fd_check_params<double>(params, run, eps)});
  }

  return cases;
}

}  // namespace loopformer
