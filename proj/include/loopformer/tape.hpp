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

#include <functional>
#include <utility>
#include <vector>

#include "loopformer/common.hpp"

namespace loopformer {

template <typename Scalar>
class Tape;

// Lightweight handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat<Scalar>& val() const { return tape->val(*this); }
};

// Records ops in construction order (which is a topological order by
// definition: an op can only consume already-recorded values) and replays
// registered backward rules in exact reverse on backward().
//
// A tape is single-owner: build one forward graph, call backward() at most
// once, then reset(). Values and gradients of leaves may live outside the
// tape; gradients accumulate (+=) into external sinks, which the caller
// zeroes (or intentionally does not, when accumulating across samples).
template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;

  // Leaf whose storage stays with the caller. If grad_sink is non-null the
  // leaf is differentiable and its gradient accumulates into *grad_sink,
  // which must already have the value's shape.
  Var<Scalar> leaf(const M& value, M* grad_sink = nullptr) {
    Node n;
    n.ext_val = &value;
    n.ext_grad = grad_sink;
    n.requires_grad = grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Non-differentiable value owned by the tape (data, masks, penalty weights).
  Var<Scalar> constant(M value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Op result. The backward closure, if any, is installed by the op after
  // it knows the result's id; see record() in ops.hpp.
  Var<Scalar> push(M value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_backward(Var<Scalar> v, std::function<void()> fn) {
    nodes_[v.id].backward = std::move(fn);
  }

  const M& val(Var<Scalar> v) const {
    const Node& n = nodes_[v.id];
    return n.ext_val != nullptr ? *n.ext_val : n.value;
  }

  bool requires_grad(Var<Scalar> v) const { return nodes_[v.id].requires_grad; }

  // Gradient accumulator for v; allocates a zeroed matrix on first touch.
  M& grad(Var<Scalar> v) {
    Node& n = nodes_[v.id];
    if (n.ext_grad != nullptr) return *n.ext_grad;
    if (n.grad.size() == 0) {
      const M& value = val(v);
      n.grad = M::Zero(value.rows(), value.cols());
    }
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 for a scalar root and sweeps every recorded op
  // exactly once in reverse order. Ops whose gradient was never touched are
  // visited but contribute nothing.
  void backward(Var<Scalar> root) {
    if (backward_done_) {
      throw Error("backward: tape already swept; reset() before reuse");
    }
    const M& r = val(root);
    if (r.rows() != 1 || r.cols() != 1) {
      throw ShapeError("backward: root must be a 1x1 scalar, got " + shape_str(r));
    }
    grad(root)(0, 0) = Scalar(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) {
        n.backward();
      }
    }
    backward_done_ = true;
  }

  std::size_t size() const { return nodes_.size(); }

  // Drops all nodes but keeps vector capacity so a tape can be reused
  // across samples without reallocating the node table.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    const M* ext_val = nullptr;  // set for leaves that reference caller storage
    M value;                     // owned value otherwise
    M* ext_grad = nullptr;       // leaf gradient sink, caller-owned
    M grad;                      // owned gradient, sized on first touch
    bool requires_grad = false;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace loopformer
