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

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "loopformer/common.hpp"
#include "loopformer/param.hpp"

namespace loopformer {

struct AdamWHyper {
  double lr = 3e-4;  // base rate; the schedule below decays it
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // global gradient norm cap, 0 disables

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adamw: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adamw: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adamw: eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("adamw: weight decay must be >= 0");
    if (clip_norm < 0.0) throw ConfigError("adamw: clip norm must be >= 0");
  }
};

// Cosine decay from the base rate toward zero over the whole run. `step` is
// the 0-based index of the upcoming update, so the first update uses the
// full base rate and the last one a small positive remainder.
inline double cosine_lr(double base, long step, long total) {
  if (step < 0) throw ConfigError("cosine_lr: negative step");
  if (total <= 0) return base;
  if (step >= total) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(frac * std::numbers::pi));
}

// Decoupled-weight-decay Adam over a fixed list of named parameters. First-
// and second-moment buffers follow the list order, so the list must be built
// once and reused; a changed list is treated as a caller bug, not resized.
template <typename Scalar>
class AdamW {
 public:
  using NamedParams = std::vector<std::pair<std::string, Param<Scalar>*>>;

  explicit AdamW(AdamWHyper hyper) : hyper_(hyper) { hyper_.validate(); }

  long step_count() const { return t_; }

  // One update with the given already-scheduled rate. Gradients are screened
  // for non-finite values and clipped by global norm before the moment
  // update; the pre-clip norm is returned for logging. Weight decay uses the
  // pre-update values, independent of the gradient path.
  double step(const NamedParams& params, double lr_now) {
    ensure_state(params);
    ++t_;
    double sq = 0.0;
    for (const auto& [name, p] : params) {
      if (!p->grad.allFinite()) {
        throw NumericError("adamw: non-finite gradient in " + name + " at step " +
                           std::to_string(t_));
      }
      sq += static_cast<double>(p->grad.template cast<double>().squaredNorm());
    }
    const double norm = std::sqrt(sq);
    Scalar scale = static_cast<Scalar>(1);
    if (hyper_.clip_norm > 0.0 && norm > hyper_.clip_norm) {
      scale = static_cast<Scalar>(hyper_.clip_norm / norm);
    }

    const Scalar b1 = static_cast<Scalar>(hyper_.beta1);
    const Scalar b2 = static_cast<Scalar>(hyper_.beta2);
    const Scalar eps = static_cast<Scalar>(hyper_.eps);
    const Scalar wd = static_cast<Scalar>(hyper_.weight_decay);
    const Scalar lr = static_cast<Scalar>(lr_now);
    const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(hyper_.beta1, t_));
    const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(hyper_.beta2, t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<Scalar>& p = *params[i].second;
      auto g = (p.grad.array() * scale).eval();
      m_[i].array() = b1 * m_[i].array() + (1 - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (1 - b2) * g.square();
      p.value.array() -=
          lr * ((m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps) + wd * p.value.array());
    }
    return norm;
  }

 private:
  void ensure_state(const NamedParams& params) {
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const auto& [name, p] : params) {
        (void)name;
        m_.push_back(Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
      }
      return;
    }
    if (m_.size() != params.size()) throw Error("adamw: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Mat<Scalar>& value = params[i].second->value;
      if (m_[i].rows() != value.rows() || m_[i].cols() != value.cols()) {
        throw Error("adamw: shape of " + params[i].first + " changed");
      }
    }
  }

  AdamWHyper hyper_;
  long t_ = 0;
  std::vector<Mat<Scalar>> m_;
  std::vector<Mat<Scalar>> v_;
};

}  // namespace loopformer
