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
#include <string>
#include <vector>

#include "loopformer/connector.hpp"
#include "loopformer/ops.hpp"
#include "loopformer/param.hpp"
#include "loopformer/rng.hpp"

namespace loopformer {

struct ModelConfig {
  int vocab = 64;
  int dim = 64;
  int n_layers = 8;
  int n_heads = 4;
  int mlp_ratio = 4;
  int patch_dim = 16;
  int recursion_steps = 2;   // R
  int connector_layers = 4;  // k, tap points for the next-step input
  int connector_hidden = 64; // MLP width inside each connector
  ConnectorVariant connector_variant = ConnectorVariant::full;
  bool shared_modality = false;
  double rms_eps = 1e-6;
  double rope_base = 10000.0;

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("model config: " + msg);
    };
    need(vocab >= 2, "vocab must be >= 2");
    need(dim >= 2, "dim must be >= 2");
    need(n_layers >= 0, "n_layers must be >= 0");
    need(n_heads >= 1 && dim % n_heads == 0, "dim must divide into heads");
    need((dim / n_heads) % 2 == 0, "head dim must be even for rotary pairs");
    need(mlp_ratio >= 1, "mlp_ratio must be >= 1");
    need(patch_dim >= 1, "patch_dim must be >= 1");
    need(recursion_steps >= 1, "recursion_steps must be >= 1");
    need(connector_hidden >= 1, "connector_hidden must be >= 1");
    need(rms_eps >= 0.0, "rms_eps must be >= 0");
    need(rope_base > 1.0, "rope_base must be > 1");
    if (recursion_steps >= 2 && connector_variant != ConnectorVariant::vanilla) {
      need(connector_layers >= 1 && connector_layers <= n_layers,
           "connector_layers must be in [1, n_layers]");
    }
  }
};

template <typename Scalar>
struct DecoderBlockParams {
  Param<Scalar> attn_norm_gain;  // (d, 1)
  Param<Scalar> w_qkv;           // (d, 3d), fused query/key/value projection
  Param<Scalar> w_attn_out;      // (d, d)
  Param<Scalar> mlp_norm_gain;   // (d, 1)
  Param<Scalar> w_mlp_in;        // (d, ratio*d)
  Param<Scalar> w_mlp_out;       // (ratio*d, d)
};

// All state of one model. The decoder blocks are reused at every recursion
// step; only the connector bank is specific to the recursion mechanism. The
// patch projector stands in for a frozen vision encoder and never trains.
template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  Param<Scalar> text_embedding;  // (vocab, d)
  Mat<Scalar> patch_projector;   // (p, d), fixed at init
  std::vector<DecoderBlockParams<Scalar>> blocks;
  Param<Scalar> head;            // (d, vocab)
  ConnectorBank<Scalar> connectors;
};

// Fixed traversal order; checkpoint layout and optimizer state follow it.
template <typename Scalar, typename F>
void visit_params(ModelParams<Scalar>& p, F&& f) {
  f("text_embedding", p.text_embedding);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const std::string prefix = "block." + std::to_string(l + 1);
    f(prefix + ".attn_norm_gain", p.blocks[l].attn_norm_gain);
    f(prefix + ".w_qkv", p.blocks[l].w_qkv);
    f(prefix + ".w_attn_out", p.blocks[l].w_attn_out);
    f(prefix + ".mlp_norm_gain", p.blocks[l].mlp_norm_gain);
    f(prefix + ".w_mlp_in", p.blocks[l].w_mlp_in);
    f(prefix + ".w_mlp_out", p.blocks[l].w_mlp_out);
  }
  f("head", p.head);
  visit_params(p.connectors, f);
}

template <typename Scalar>
Eigen::Index trainable_count(ModelParams<Scalar>& p) {
  Eigen::Index total = 0;
  visit_params(p, [&](const std::string&, Param<Scalar>& param) { total += param.count(); });
  return total;
}

template <typename Scalar>
Eigen::Index connector_count(ModelParams<Scalar>& p) {
  Eigen::Index total = 0;
  visit_params(p.connectors, [&](const std::string&, Param<Scalar>& param) {
    total += param.count();
  });
  return total;
}

// Weights drawn normal(0, 0.02), norm gains at one. Each tensor family gets
// its own seed stream so streams do not shift when unrelated parts change.
// With a single recursion step no connector bank is allocated; that
// configuration is exactly the non-recursive baseline.
template <typename Scalar>
ModelParams<Scalar> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<Scalar> p;
  p.config = config;
  const Eigen::Index d = config.dim;

  Rng rng_backbone(mix64(seed, 1));
  Rng rng_projector(mix64(seed, 2));
  Rng rng_connector(mix64(seed, 3));

  p.text_embedding.init(rng_backbone.normal_matrix<Scalar>(config.vocab, d, 0.02));
  p.patch_projector = rng_projector.normal_matrix<Scalar>(config.patch_dim, d, 0.02);
  p.blocks.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& b : p.blocks) {
    b.attn_norm_gain.init(Mat<Scalar>::Ones(d, 1));
    b.w_qkv.init(rng_backbone.normal_matrix<Scalar>(d, 3 * d, 0.02));
    b.w_attn_out.init(rng_backbone.normal_matrix<Scalar>(d, d, 0.02));
    b.mlp_norm_gain.init(Mat<Scalar>::Ones(d, 1));
    b.w_mlp_in.init(rng_backbone.normal_matrix<Scalar>(d, config.mlp_ratio * d, 0.02));
    b.w_mlp_out.init(rng_backbone.normal_matrix<Scalar>(config.mlp_ratio * d, d, 0.02));
  }
  p.head.init(rng_backbone.normal_matrix<Scalar>(d, config.vocab, 0.02));

  if (config.recursion_steps >= 2) {
    p.connectors = make_connector_bank<Scalar>(
        config.n_layers, config.connector_layers, config.connector_variant,
        config.shared_modality, d, config.connector_hidden, rng_connector);
  }
  return p;
}

// One training or evaluation example batch: vision patches first, then text.
template <typename Scalar>
struct MultimodalBatch {
  Mat<Scalar> raw_patches;         // (N_v, p)
  std::vector<int> text_ids;       // (N_t)
  std::vector<int> targets;        // (N_t), next-token ids
  std::vector<std::uint8_t> loss_mask;  // true only on answer positions

  Eigen::Index n_vision() const { return raw_patches.rows(); }
  Eigen::Index n_text() const { return static_cast<Eigen::Index>(text_ids.size()); }
};

// Everything one recursion step produces, as live graph nodes.
template <typename Scalar>
struct StepGraph {
  std::vector<Var<Scalar>> hidden;  // L+1 states, hidden[0] is this step's input
  Var<Scalar> logits;               // (N_t, vocab)
  Var<Scalar> token_losses;         // (N_t, 1) raw per-token cross entropy
};

// Projected patches and embedded text, kept separate because the next-step
// input anchors to these exact first-step values per modality.
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> embed(Tape<Scalar>& t, const MultimodalBatch<Scalar>& batch,
                                          ModelParams<Scalar>& params, bool with_grad) {
  if (batch.raw_patches.rows() > 0 && batch.raw_patches.cols() != params.patch_projector.rows()) {
    throw ShapeError("embed: patches " + shape_str(batch.raw_patches) + " vs projector " +
                     shape_str(params.patch_projector));
  }
  Var<Scalar> vision = matmul(t.leaf(batch.raw_patches), t.leaf(params.patch_projector));
  Var<Scalar> text =
      embedding_rows(use_param(t, params.text_embedding, with_grad), batch.text_ids);
  return {vision, text};
}

// Pre-norm transformer stack over the concatenated sequence; returns all
// L+1 states with hidden[0] == input. The same parameters serve every call,
// which is what makes the recursion weight-shared.
template <typename Scalar>
std::vector<Var<Scalar>> decoder_forward(Tape<Scalar>& t, Var<Scalar> input,
                                         ModelParams<Scalar>& params, bool with_grad) {
  std::vector<Var<Scalar>> hidden;
  hidden.reserve(params.blocks.size() + 1);
  hidden.push_back(input);
  const Scalar eps = static_cast<Scalar>(params.config.rms_eps);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    DecoderBlockParams<Scalar>& b = params.blocks[l];
    try {
      Var<Scalar> x = hidden.back();
      Var<Scalar> attn_in = rms_norm(x, use_param(t, b.attn_norm_gain, with_grad), eps);
      Var<Scalar> attn = causal_attention(matmul(attn_in, use_param(t, b.w_qkv, with_grad)),
                                          params.config.n_heads, params.config.rope_base);
      x = add(x, matmul(attn, use_param(t, b.w_attn_out, with_grad)));
      Var<Scalar> mlp_in = rms_norm(x, use_param(t, b.mlp_norm_gain, with_grad), eps);
      Var<Scalar> mlp = matmul(silu(matmul(mlp_in, use_param(t, b.w_mlp_in, with_grad))),
                               use_param(t, b.w_mlp_out, with_grad));
      hidden.push_back(add(x, mlp));
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(l + 1) + ": " + e.what());
    }
  }
  return hidden;
}

// Logits over text positions only; vision positions predict nothing.
template <typename Scalar>
Var<Scalar> lm_head(Tape<Scalar>& t, Var<Scalar> last_hidden, Eigen::Index n_vision,
                    ModelParams<Scalar>& params, bool with_grad) {
  auto [vision_part, text_part] = split_rows(last_hidden, n_vision);
  (void)vision_part;
  return matmul(text_part, use_param(t, params.head, with_grad));
}

// Runs `steps` recursion passes through the shared decoder. Each pass scores
// its own logits; between passes the connector bank builds the next input
// from this pass's hidden states, anchored at the original embeddings.
template <typename Scalar>
std::vector<StepGraph<Scalar>> recursive_forward(Tape<Scalar>& t,
                                                 const MultimodalBatch<Scalar>& batch,
                                                 ModelParams<Scalar>& params, int steps,
                                                 bool with_grad) {
  if (steps < 1) throw ConfigError("recursive_forward: steps must be >= 1");
  const Scalar eps = static_cast<Scalar>(params.config.rms_eps);
  auto [e1_vision, e1_text] = embed(t, batch, params, with_grad);
  Var<Scalar> input = concat_rows<Scalar>({e1_vision, e1_text});

  std::vector<StepGraph<Scalar>> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (int r = 1; r <= steps; ++r) {
    StepGraph<Scalar> step;
    step.hidden = decoder_forward(t, input, params, with_grad);
    step.logits = lm_head(t, step.hidden.back(), batch.n_vision(), params, with_grad);
    step.token_losses = cross_entropy_rows(step.logits, batch.targets);
    out.push_back(step);
    if (r < steps) {
      input = build_next_input(t, e1_vision, e1_text, out.back().hidden, params.connectors,
                               eps, with_grad);
    }
  }
  return out;
}

}  // namespace loopformer
