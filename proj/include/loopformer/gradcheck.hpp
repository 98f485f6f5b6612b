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
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "loopformer/ops.hpp"
#include "loopformer/param.hpp"
#include "loopformer/tape.hpp"

namespace loopformer {

struct GradCheckReport {
  double max_rel_err = 0.0;
  // Coordinate where the worst error occurred, for debugging.
  int worst_param = -1;
  Eigen::Index worst_row = -1;
  Eigen::Index worst_col = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference verification of reverse-mode gradients. `build` gets a
// fresh tape plus one leaf per entry of `params` (same order) and must return
// a 1x1 scalar. Every coordinate of every param is perturbed by +/- eps.
// Meaningful only at 64-bit; differences drown in rounding at 32-bit.
template <typename S>
GradCheckReport grad_check(
    const std::vector<Mat<S>*>& params,
    const std::function<Var<S>(Tape<S>&, const std::vector<Var<S>>&)>& build, S eps) {
  static_assert(sizeof(S) >= 8, "grad_check requires a 64-bit scalar");
  if (!(eps >= S(1e-7) && eps <= S(1e-4))) {
    throw Error("grad_check: eps outside [1e-7, 1e-4]");
  }

  auto eval = [&](bool with_grad, std::vector<Mat<S>>* grads) -> S {
    Tape<S> tape;
    std::vector<Var<S>> leaves;
    leaves.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      Mat<S>* sink = with_grad ? &(*grads)[p] : nullptr;
      leaves.push_back(tape.leaf(*params[p], sink));
    }
    Var<S> root = build(tape, leaves);
    const S value = tape.val(root)(0, 0);
    if (!std::isfinite(static_cast<double>(value))) {
      throw NumericError("grad_check: objective is non-finite");
    }
    if (with_grad) tape.backward(root);
    return value;
  };

  std::vector<Mat<S>> analytic;
  analytic.reserve(params.size());
  for (const Mat<S>* p : params) analytic.push_back(Mat<S>::Zero(p->rows(), p->cols()));
  eval(true, &analytic);

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat<S>& param = *params[p];
    for (Eigen::Index i = 0; i < param.rows(); ++i) {
      for (Eigen::Index j = 0; j < param.cols(); ++j) {
        const S orig = param(i, j);
        param(i, j) = orig + eps;
        const S plus = eval(false, nullptr);
        param(i, j) = orig - eps;
        const S minus = eval(false, nullptr);
        param(i, j) = orig;
        const double fd = static_cast<double>(plus - minus) / (2.0 * static_cast<double>(eps));
        const double an = static_cast<double>(analytic[p](i, j));
        const double denom = std::max({std::abs(an), std::abs(fd), 1e-12});
        const double rel = std::abs(an - fd) / denom;
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_param = static_cast<int>(p);
          report.worst_row = i;
          report.worst_col = j;
          report.analytic = an;
          report.numeric = fd;
        }
      }
    }
  }
  return report;
}

struct FdNamedReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  Eigen::Index worst_row = -1;
  Eigen::Index worst_col = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// The same central-difference verification for graphs whose parameters flow
// through Param bindings (the whole model stack does). `run` must rebuild
// its graph from scratch on every call and return the scalar objective;
// with_grad additionally sweeps gradients into the param buffers, which this
// driver zeroes first. Parameter values are perturbed in place.
template <typename Scalar>
FdNamedReport fd_check_params(const std::vector<std::pair<std::string, Param<Scalar>*>>& params,
                              const std::function<double(bool)>& run, Scalar eps) {
  static_assert(sizeof(Scalar) >= 8, "fd_check_params requires a 64-bit scalar");
  if (!(eps >= Scalar(1e-7) && eps <= Scalar(1e-4))) {
    throw Error("fd_check_params: eps outside [1e-7, 1e-4]");
  }
  for (auto& [name, p] : params) {
    (void)name;
    p->grad.setZero();
  }
  if (!std::isfinite(run(true))) throw NumericError("fd_check_params: objective is non-finite");
  std::vector<Mat<Scalar>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) {
    (void)name;
    analytic.push_back(p->grad);
  }

  FdNamedReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat<Scalar>& value = params[p].second->value;
    for (Eigen::Index i = 0; i < value.rows(); ++i) {
      for (Eigen::Index j = 0; j < value.cols(); ++j) {
        const Scalar orig = value(i, j);
        value(i, j) = orig + eps;
        const double plus = run(false);
        value(i, j) = orig - eps;
        const double minus = run(false);
        value(i, j) = orig;
        const double fd = (plus - minus) / (2.0 * static_cast<double>(eps));
        const double an = static_cast<double>(analytic[p](i, j));
        const double denom = std::max({std::abs(an), std::abs(fd), 1e-12});
        const double rel = std::abs(an - fd) / denom;
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_tensor = params[p].first;
          report.worst_row = i;
          report.worst_col = j;
          report.analytic = an;
          report.numeric = fd;
        }
      }
    }
  }
  return report;
}

}  // namespace loopformer
