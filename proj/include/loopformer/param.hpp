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

#include <utility>

#include "loopformer/tape.hpp"

namespace loopformer {

// A trainable tensor: value plus a gradient accumulator of the same shape.
// Graphs reference both in place; the optimizer reads grad and writes value.
template <typename Scalar>
struct Param {
  Mat<Scalar> value;
  Mat<Scalar> grad;

  void init(Mat<Scalar> v) {
    value = std::move(v);
    grad = Mat<Scalar>::Zero(value.rows(), value.cols());
  }

  bool allocated() const { return value.size() > 0; }
  Eigen::Index count() const { return value.size(); }
};

// Records a parameter on the tape; with_grad decides whether backward
// accumulates into param.grad or the leaf is treated as frozen.
template <typename Scalar>
Var<Scalar> use_param(Tape<Scalar>& t, Param<Scalar>& p, bool with_grad) {
  return t.leaf(p.value, with_grad ? &p.grad : nullptr);
}

}  // namespace loopformer
