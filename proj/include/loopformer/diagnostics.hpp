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

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "loopformer/model.hpp"
#include "loopformer/rng.hpp"

namespace loopformer {

// Per recursion step: how token magnitudes and token geometry evolve with
// depth. Layer 0 is the step's own input, so its alignment score is 1.
struct DiagnosticsReport {
  std::vector<double> per_layer_norm;  // mean token L2 norm, layers 0..L
  std::vector<double> per_layer_cka;   // alignment with the step input, layers 0..L
  long sample_count = 0;
  std::string config_fingerprint;
};

// Mean over token rows of the row L2 norm, one value per layer.
template <typename Scalar>
std::vector<double> layer_l2_norms(const std::vector<Mat<Scalar>>& hidden) {
  if (hidden.empty()) throw Error("layer_l2_norms: no hidden states");
  std::vector<double> out;
  out.reserve(hidden.size());
  for (const Mat<Scalar>& h : hidden) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      acc += static_cast<double>(h.row(i).norm());
    }
    out.push_back(h.rows() > 0 ? acc / static_cast<double>(h.rows()) : 0.0);
  }
  return out;
}

// Linear centered kernel alignment between two representations of the same
// rows: ||Yc' Xc||_F^2 / (||Xc' Xc||_F * ||Yc' Yc||_F) after centering each
// column. Invariant to orthogonal right-rotation and isotropic scaling of
// either argument; 1 when the two span identical similarity structure.
template <typename Scalar>
double linear_cka(const Mat<Scalar>& x, const Mat<Scalar>& y) {
  require_shape(x.rows() == y.rows(), "linear_cka", x, y);
  if (x.rows() < 2) throw Error("linear_cka: need at least 2 rows");
  MatD xc = x.template cast<double>();
  MatD yc = y.template cast<double>();
  xc.rowwise() -= xc.colwise().mean();
  yc.rowwise() -= yc.colwise().mean();
  const double cross = (yc.transpose() * xc).squaredNorm();
  const double x_self = (xc.transpose() * xc).norm();
  const double y_self = (yc.transpose() * yc).norm();
  if (x_self == 0.0 || y_self == 0.0) {
    throw Error("linear_cka: zero-variance input");
  }
  return cross / (x_self * y_self);
}

// Evaluates the model on a slice and aggregates both depth profiles per
// recursion step. Tokens pooled across all samples are the row axis for the
// alignment metric, subsampled (seeded) down to cap rows when the slice has
// more; the norm profile uses every token.
template <typename Scalar>
std::vector<DiagnosticsReport> run_diagnostics(ModelParams<Scalar>& params,
                                               const std::vector<MultimodalBatch<Scalar>>& slice,
                                               int steps, Eigen::Index cka_row_cap,
                                               std::uint64_t subsample_seed,
                                               const std::string& fingerprint) {
  if (slice.empty()) throw Error("run_diagnostics: empty slice");
  if (cka_row_cap < 2) throw Error("run_diagnostics: row cap must be >= 2");
  const std::size_t n_layers_1 = static_cast<std::size_t>(params.config.n_layers) + 1;

  Eigen::Index total_tokens = 0;
  for (const auto& b : slice) total_tokens += b.n_vision() + b.n_text();

  // One shared token subset keeps rows aligned between each layer and the
  // step input.
  std::vector<Eigen::Index> keep(static_cast<std::size_t>(total_tokens));
  std::iota(keep.begin(), keep.end(), 0);
  if (total_tokens > cka_row_cap) {
    Rng rng(mix64(subsample_seed, 0x6b61));
    for (Eigen::Index i = 0; i < cka_row_cap; ++i) {
      const Eigen::Index j = i + static_cast<Eigen::Index>(
                                     rng.below(static_cast<std::uint64_t>(total_tokens - i)));
      std::swap(keep[static_cast<std::size_t>(i)], keep[static_cast<std::size_t>(j)]);
    }
    keep.resize(static_cast<std::size_t>(cka_row_cap));
    std::sort(keep.begin(), keep.end());
  }
  const Eigen::Index pooled_rows = static_cast<Eigen::Index>(keep.size());

  struct StepAccum {
    std::vector<double> norm_sums;
    std::vector<Mat<Scalar>> pooled;  // (pooled_rows, d) per layer
    Eigen::Index filled = 0;
  };
  std::vector<StepAccum> accum(static_cast<std::size_t>(steps));
  for (auto& a : accum) {
    a.norm_sums.assign(n_layers_1, 0.0);
    a.pooled.assign(n_layers_1, Mat<Scalar>(pooled_rows, params.config.dim));
  }

  Eigen::Index token_base = 0;
  std::size_t keep_cursor = 0;
  for (const auto& batch : slice) {
    Tape<Scalar> tape;
    auto step_graphs = recursive_forward(tape, batch, params, steps, false);
    const Eigen::Index n_tokens = batch.n_vision() + batch.n_text();
    // Rows of this sample that made the pooled subset.
    std::vector<Eigen::Index> local;
    while (keep_cursor < keep.size() && keep[keep_cursor] < token_base + n_tokens) {
      local.push_back(keep[keep_cursor] - token_base);
      ++keep_cursor;
    }
    for (int r = 0; r < steps; ++r) {
      StepAccum& a = accum[static_cast<std::size_t>(r)];
      for (std::size_t l = 0; l < n_layers_1; ++l) {
        const Mat<Scalar>& h = tape.val(step_graphs[static_cast<std::size_t>(r)].hidden[l]);
        for (Eigen::Index i = 0; i < h.rows(); ++i) {
          a.norm_sums[l] += static_cast<double>(h.row(i).norm());
        }
        for (std::size_t i = 0; i < local.size(); ++i) {
          a.pooled[l].row(a.filled + static_cast<Eigen::Index>(i)) = h.row(local[i]);
        }
      }
      a.filled += static_cast<Eigen::Index>(local.size());
    }
    token_base += n_tokens;
  }

  std::vector<DiagnosticsReport> reports;
  reports.reserve(static_cast<std::size_t>(steps));
  for (int r = 0; r < steps; ++r) {
    StepAccum& a = accum[static_cast<std::size_t>(r)];
    DiagnosticsReport rep;
    rep.sample_count = static_cast<long>(slice.size());
    rep.config_fingerprint = fingerprint;
    for (std::size_t l = 0; l < n_layers_1; ++l) {
      rep.per_layer_norm.push_back(a.norm_sums[l] / static_cast<double>(total_tokens));
      rep.per_layer_cka.push_back(linear_cka(a.pooled[l], a.pooled[0]));
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace loopformer
