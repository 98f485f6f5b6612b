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
#include <vector>

#include "loopformer/ops.hpp"
#include "loopformer/param.hpp"
#include "loopformer/rng.hpp"

namespace loopformer {

// What the bridge between recursion steps computes from a hidden-state slice.
// The arms grow from nothing to the full normalize + MLP + scaled-residual
// form; `vanilla` bypasses the bridge and feeds the last hidden state back
// as-is.
enum class ConnectorVariant {
  vanilla,
  norm_only,
  norm_mlp,
  norm_mlp_residual,  // residual added with fixed unit scale
  full,               // residual scaled by a learned per-channel vector
};

inline const char* to_string(ConnectorVariant v) {
  switch (v) {
    case ConnectorVariant::vanilla: return "vanilla";
    case ConnectorVariant::norm_only: return "norm_only";
    case ConnectorVariant::norm_mlp: return "norm_mlp";
    case ConnectorVariant::norm_mlp_residual: return "norm_mlp_residual";
    case ConnectorVariant::full: return "full";
  }
  return "unknown";
}

inline ConnectorVariant connector_variant_from(const std::string& s) {
  if (s == "vanilla") return ConnectorVariant::vanilla;
  if (s == "norm_only") return ConnectorVariant::norm_only;
  if (s == "norm_mlp") return ConnectorVariant::norm_mlp;
  if (s == "norm_mlp_residual") return ConnectorVariant::norm_mlp_residual;
  if (s == "full") return ConnectorVariant::full;
  throw ConfigError("unknown connector variant '" + s + "'");
}

// One per (selected layer, modality). Only the tensors the active variant
// reads are allocated; see init_connectors.
template <typename Scalar>
struct ConnectorParams {
  Param<Scalar> rms_gain;  // (d, 1)
  Param<Scalar> scale_s;   // (d, 1), zero at init
  Param<Scalar> w_up;      // (d, h)
  Param<Scalar> w_down;    // (h, d), zero at init
};

// Layer indices tapped for the next-step input, plus their per-modality
// transform parameters. One bank is reused at every recursion step.
template <typename Scalar>
struct ConnectorBank {
  std::vector<int> layers;  // strictly increasing, always ends at L
  ConnectorVariant variant = ConnectorVariant::full;
  bool shared_modality = false;  // ablation: one transform for both slices
  std::vector<ConnectorParams<Scalar>> vision;
  std::vector<ConnectorParams<Scalar>> text;  // empty when shared_modality
};

// Evenly spaced tap points over depth: ceil(i * L / k) for i = 1..k.
// Always includes the last layer.
inline std::vector<int> select_layers(int n_layers, int k) {
  if (k < 1 || k > n_layers) {
    throw ConfigError("select_layers: need 1 <= k <= L, got k=" + std::to_string(k) +
                      " L=" + std::to_string(n_layers));
  }
  std::vector<int> out;
  for (int i = 1; i <= k; ++i) {
    const int idx = (i * n_layers + k - 1) / k;
    if (out.empty() || out.back() != idx) out.push_back(idx);
  }
  return out;
}

// Allocates and initializes the tensors the variant reads. The transform is
// exactly zero at init: the residual scale and down-projection start at zero,
// so only the up-projection (normal, std 0.02) and unit norm gains carry
// nonzero values.
template <typename Scalar>
void init_connectors(ConnectorBank<Scalar>& bank, Eigen::Index d, Eigen::Index hidden, Rng& rng) {
  auto init_one = [&](ConnectorParams<Scalar>& p) {
    p.rms_gain.init(Mat<Scalar>::Ones(d, 1));
    if (bank.variant == ConnectorVariant::norm_only) return;
    p.w_up.init(rng.normal_matrix<Scalar>(d, hidden, 0.02));
    p.w_down.init(Mat<Scalar>::Zero(hidden, d));
    if (bank.variant == ConnectorVariant::full) {
      p.scale_s.init(Mat<Scalar>::Zero(d, 1));
    }
  };
  bank.vision.clear();
  bank.text.clear();
  if (bank.variant == ConnectorVariant::vanilla) return;
  bank.vision.resize(bank.layers.size());
  for (auto& p : bank.vision) init_one(p);
  if (!bank.shared_modality) {
    bank.text.resize(bank.layers.size());
    for (auto& p : bank.text) init_one(p);
  }
}

template <typename Scalar>
ConnectorBank<Scalar> make_connector_bank(int n_layers, int k, ConnectorVariant variant,
                                          bool shared_modality, Eigen::Index d,
                                          Eigen::Index hidden, Rng& rng) {
  ConnectorBank<Scalar> bank;
  bank.layers = select_layers(n_layers, k);
  bank.variant = variant;
  bank.shared_modality = shared_modality;
  init_connectors(bank, d, hidden, rng);
  return bank;
}

// Visits every trainable tensor in the bank with a stable name, vision before
// text, layers in S order.
template <typename Scalar, typename F>
void visit_params(ConnectorBank<Scalar>& bank, F&& f) {
  auto visit_one = [&](ConnectorParams<Scalar>& p, const std::string& prefix) {
    f(prefix + ".rms_gain", p.rms_gain);
    if (p.w_up.allocated()) f(prefix + ".w_up", p.w_up);
    if (p.w_down.allocated()) f(prefix + ".w_down", p.w_down);
    if (p.scale_s.allocated()) f(prefix + ".scale_s", p.scale_s);
  };
  for (std::size_t i = 0; i < bank.vision.size(); ++i) {
    visit_one(bank.vision[i], "connector." + std::to_string(bank.layers[i]) + ".v");
  }
  for (std::size_t i = 0; i < bank.text.size(); ++i) {
    visit_one(bank.text[i], "connector." + std::to_string(bank.layers[i]) + ".t");
  }
}

// The per-layer per-modality transform A = norm ⊙ s + MLP(norm), with the
// reduced forms used by the ablation arms.
template <typename Scalar>
Var<Scalar> connector_apply(Tape<Scalar>& t, Var<Scalar> h_slice, ConnectorParams<Scalar>& p,
                            ConnectorVariant variant, Scalar eps, bool with_grad) {
  if (variant == ConnectorVariant::vanilla) {
    throw Error("connector_apply: vanilla feedback has no transform");
  }
  Var<Scalar> normed = rms_norm(h_slice, use_param(t, p.rms_gain, with_grad), eps);
  if (variant == ConnectorVariant::norm_only) return normed;
  Var<Scalar> mlp = matmul(silu(matmul(normed, use_param(t, p.w_up, with_grad))),
                           use_param(t, p.w_down, with_grad));
  switch (variant) {
    case ConnectorVariant::norm_mlp:
      return mlp;
    case ConnectorVariant::norm_mlp_residual:
      return add(normed, mlp);
    default:
      return add(col_scale(normed, use_param(t, p.scale_s, with_grad)), mlp);
  }
}

// Builds the next recursion step's input. The sum over tapped layers is
// anchored at the original first-step embeddings, not the current step's
// input; with a zero-initialized bank the result is exactly those embeddings.
// The vanilla arm ignores the anchor and feeds back the deepest state.
template <typename Scalar>
Var<Scalar> build_next_input(Tape<Scalar>& t, Var<Scalar> e1_vision, Var<Scalar> e1_text,
                             const std::vector<Var<Scalar>>& hidden, ConnectorBank<Scalar>& bank,
                             Scalar eps, bool with_grad) {
  if (bank.variant == ConnectorVariant::vanilla) {
    if (hidden.empty()) throw Error("build_next_input: no hidden states");
    return hidden.back();
  }
  if (bank.layers.empty()) {
    throw Error(
        "build_next_input: no connector bank; the model was built without recursion");
  }
  const Eigen::Index n_vision = t.val(e1_vision).rows();
  Var<Scalar> v_next = e1_vision;
  Var<Scalar> t_next = e1_text;
  for (std::size_t i = 0; i < bank.layers.size(); ++i) {
    const int layer = bank.layers[i];
    if (layer < 1 || layer >= static_cast<int>(hidden.size())) {
      throw Error("build_next_input: tapped layer " + std::to_string(layer) +
                  " missing from " + std::to_string(hidden.size() - 1) + " hidden states");
    }
    auto [h_vision, h_text] = split_rows(hidden[static_cast<std::size_t>(layer)], n_vision);
    ConnectorParams<Scalar>& pv = bank.vision[i];
    ConnectorParams<Scalar>& pt = bank.shared_modality ? bank.vision[i] : bank.text[i];
    v_next = add(v_next, connector_apply(t, h_vision, pv, bank.variant, eps, with_grad));
    t_next = add(t_next, connector_apply(t, h_text, pt, bank.variant, eps, with_grad));
  }
  return concat_rows<Scalar>({v_next, t_next});
}

}  // namespace loopformer
