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
#include <utility>
#include <vector>

#include "loopformer/ops.hpp"
#include "loopformer/tape.hpp"

namespace loopformer {

enum class LossVariant { final_step_only, each_step, monotonic };

inline const char* to_string(LossVariant v) {
  switch (v) {
    case LossVariant::final_step_only: return "final_step_only";
    case LossVariant::each_step: return "each_step";
    case LossVariant::monotonic: return "monotonic";
  }
  return "unknown";
}

inline LossVariant loss_variant_from(const std::string& s) {
  if (s == "final_step_only") return LossVariant::final_step_only;
  if (s == "each_step") return LossVariant::each_step;
  if (s == "monotonic") return LossVariant::monotonic;
  throw ConfigError("unknown loss variant '" + s + "'");
}

struct LossConfig {
  LossVariant variant = LossVariant::monotonic;
  double beta = 1.5;

  void validate() const {
    // beta == 1 is legal and makes monotonic behave exactly like each_step.
    if (!(beta >= 1.0)) throw ConfigError("loss config: beta must be >= 1");
  }
};

struct LossBreakdown {
  std::vector<double> per_step_raw;       // masked mean raw CE per step
  std::vector<double> per_step_adjusted;  // masked mean after any penalty
  std::vector<double> degraded_fraction;  // share of masked tokens worse than prev step
  double total = 0.0;
};

// Per-token penalty rule: a token whose loss strictly worsened versus the
// previous step has its current loss scaled by beta; ties and improvements
// pass through. prev is a plain value, never a gradient path.
template <typename Scalar>
Mat<Scalar> monotonic_adjust(const Mat<Scalar>& cur, const Mat<Scalar>& prev, Scalar beta) {
  require_shape(cur.rows() == prev.rows() && cur.cols() == prev.cols(), "monotonic_adjust",
                cur, prev);
  return (cur.array() > prev.array()).select(cur.array() * beta, cur.array()).matrix();
}

// Combines the per-step per-token losses of one sample into the training
// scalar. Gradients flow only through each step's own raw losses; penalty
// indicators and previous-step losses enter as constants, so worsening
// tokens simply see their gradient scaled by beta.
//
// The masked mean divides by the number of mask-true tokens. A caller
// aggregating several samples into one batch objective passes the batch-wide
// masked count as denom_override and sums the resulting scalars (and
// breakdown fields), which reproduces the batch masked mean exactly.
template <typename Scalar>
std::pair<Var<Scalar>, LossBreakdown> total_loss(Tape<Scalar>& t,
                                                 const std::vector<Var<Scalar>>& step_losses,
                                                 const std::vector<std::uint8_t>& mask,
                                                 const LossConfig& cfg,
                                                 Eigen::Index denom_override = 0) {
  cfg.validate();
  if (step_losses.empty()) throw ConfigError("total_loss: need at least one step");
  const Eigen::Index n = static_cast<Eigen::Index>(mask.size());
  Eigen::Index mask_count = 0;
  for (std::uint8_t m : mask) mask_count += (m != 0);
  if (mask_count == 0) throw Error("total_loss: empty loss mask");
  const Eigen::Index denom = denom_override > 0 ? denom_override : mask_count;
  const Scalar inv_denom = Scalar(1) / static_cast<Scalar>(denom);

  for (const Var<Scalar>& v : step_losses) {
    const Mat<Scalar>& lv = t.val(v);
    if (lv.rows() != n || lv.cols() != 1) {
      throw ShapeError("total_loss: step losses " + shape_str(lv) + " vs mask length " +
                       std::to_string(n));
    }
  }

  const std::size_t steps = step_losses.size();
  LossBreakdown breakdown;
  breakdown.per_step_raw.resize(steps, 0.0);
  breakdown.per_step_adjusted.resize(steps, 0.0);
  breakdown.degraded_fraction.resize(steps, 0.0);

  // Masked mean of step r with per-token weights folded into one constant
  // vector; weight beta/denom where the penalty fires, 1/denom elsewhere.
  auto weighted_mean = [&](std::size_t r, bool penalize) {
    const Mat<Scalar>& cur = t.val(step_losses[r]);
    Mat<Scalar> w = Mat<Scalar>::Zero(n, 1);
    Eigen::Index degraded = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mask[static_cast<std::size_t>(i)] == 0) continue;
      Scalar wi = inv_denom;
      if (penalize) {
        const Mat<Scalar>& prev = t.val(step_losses[r - 1]);
        if (cur(i, 0) > prev(i, 0)) {
          wi *= static_cast<Scalar>(cfg.beta);
          ++degraded;
        }
      }
      w(i, 0) = wi;
    }
    breakdown.degraded_fraction[r] =
        static_cast<double>(degraded) / static_cast<double>(denom);
    return sum_all(cmul(step_losses[r], t.constant(std::move(w))));
  };

  auto raw_mean_value = [&](std::size_t r) {
    const Mat<Scalar>& cur = t.val(step_losses[r]);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mask[static_cast<std::size_t>(i)] != 0) acc += static_cast<double>(cur(i, 0));
    }
    return acc / static_cast<double>(denom);
  };

  for (std::size_t r = 0; r < steps; ++r) breakdown.per_step_raw[r] = raw_mean_value(r);

  Var<Scalar> total;
  switch (cfg.variant) {
    case LossVariant::final_step_only: {
      total = weighted_mean(steps - 1, false);
      breakdown.per_step_adjusted[steps - 1] = static_cast<double>(t.val(total)(0, 0));
      break;
    }
    case LossVariant::each_step: {
      for (std::size_t r = 0; r < steps; ++r) {
        Var<Scalar> term = weighted_mean(r, false);
        breakdown.per_step_adjusted[r] = static_cast<double>(t.val(term)(0, 0));
        total = (r == 0) ? term : add(total, term);
      }
      break;
    }
    case LossVariant::monotonic: {
      for (std::size_t r = 0; r < steps; ++r) {
        Var<Scalar> term = weighted_mean(r, r >= 1);
        breakdown.per_step_adjusted[r] = static_cast<double>(t.val(term)(0, 0));
        total = (r == 0) ? term : add(total, term);
      }
      break;
    }
  }
  breakdown.total = static_cast<double>(t.val(total)(0, 0));
  return {total, breakdown};
}

}  // namespace loopformer
