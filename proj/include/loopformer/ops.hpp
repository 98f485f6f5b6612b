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
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "loopformer/tape.hpp"

namespace loopformer {

// Every op validates shapes, computes the forward value, rejects non-finite
// results, and registers a backward rule when any input is differentiable.
// Backward rules accumulate with += and guard each input on requires_grad.

namespace detail {

template <typename Scalar>
Var<Scalar> record(Tape<Scalar>& t, const char* op, Mat<Scalar> value, bool requires_grad) {
  if (!value.allFinite()) {
    throw NumericError(std::string(op) + " produced non-finite values");
  }
  return t.push(std::move(value), requires_grad);
}

template <typename Scalar>
void check_same_tape(Var<Scalar> a, Var<Scalar> b, const char* op) {
  if (a.tape != b.tape) {
    throw Error(std::string(op) + ": operands recorded on different tapes");
  }
}

}  // namespace detail

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b, "matmul");
  Tape<S>& t = *a.tape;
  const Mat<S>& av = t.val(a);
  const Mat<S>& bv = t.val(b);
  require_shape(av.cols() == bv.rows(), "matmul", av, bv);
  Mat<S> y(av.rows(), bv.cols());
  y.noalias() = av * bv;
  const bool req = t.requires_grad(a) || t.requires_grad(b);
  Var<S> out = detail::record(t, "matmul", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, a, b, out] {
      const Mat<S>& dy = tp->grad(out);
      if (tp->requires_grad(a)) tp->grad(a).noalias() += dy * tp->val(b).transpose();
      if (tp->requires_grad(b)) tp->grad(b).noalias() += tp->val(a).transpose() * dy;
    });
  }
  return out;
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b, "add");
  Tape<S>& t = *a.tape;
  const Mat<S>& av = t.val(a);
  const Mat<S>& bv = t.val(b);
  require_shape(av.rows() == bv.rows() && av.cols() == bv.cols(), "add", av, bv);
  const bool req = t.requires_grad(a) || t.requires_grad(b);
  Var<S> out = detail::record(t, "add", Mat<S>(av + bv), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, a, b, out] {
      const Mat<S>& dy = tp->grad(out);
      if (tp->requires_grad(a)) tp->grad(a) += dy;
      if (tp->requires_grad(b)) tp->grad(b) += dy;
    });
  }
  return out;
}

// Elementwise product of same-shape operands.
template <typename S>
Var<S> cmul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b, "cmul");
  Tape<S>& t = *a.tape;
  const Mat<S>& av = t.val(a);
  const Mat<S>& bv = t.val(b);
  require_shape(av.rows() == bv.rows() && av.cols() == bv.cols(), "cmul", av, bv);
  const bool req = t.requires_grad(a) || t.requires_grad(b);
  Var<S> out = detail::record(t, "cmul", Mat<S>(av.cwiseProduct(bv)), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, a, b, out] {
      const Mat<S>& dy = tp->grad(out);
      if (tp->requires_grad(a)) tp->grad(a) += dy.cwiseProduct(tp->val(b));
      if (tp->requires_grad(b)) tp->grad(b) += dy.cwiseProduct(tp->val(a));
    });
  }
  return out;
}

// Scales column j of x by s(j); s is a (cols, 1) vector.
template <typename S>
Var<S> col_scale(Var<S> x, Var<S> s) {
  detail::check_same_tape(x, s, "col_scale");
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.val(x);
  const Mat<S>& sv = t.val(s);
  require_shape(sv.cols() == 1 && sv.rows() == xv.cols(), "col_scale", xv, sv);
  Mat<S> y = (xv.array().rowwise() * sv.transpose().array().row(0)).matrix();
  const bool req = t.requires_grad(x) || t.requires_grad(s);
  Var<S> out = detail::record(t, "col_scale", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, x, s, out] {
      const Mat<S>& dy = tp->grad(out);
      if (tp->requires_grad(x)) {
        tp->grad(x) +=
            (dy.array().rowwise() * tp->val(s).transpose().array().row(0)).matrix();
      }
      if (tp->requires_grad(s)) {
        tp->grad(s) += dy.cwiseProduct(tp->val(x)).colwise().sum().transpose();
      }
    });
  }
  return out;
}

// Multiplies by a plain (non-differentiable) scalar constant.
template <typename S>
Var<S> scale(Var<S> x, S c) {
  Tape<S>& t = *x.tape;
  const bool req = t.requires_grad(x);
  Var<S> out = detail::record(t, "scale", Mat<S>(t.val(x) * c), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, x, out, c] { tp->grad(x) += c * tp->grad(out); });
  }
  return out;
}

// Stacks inputs along the token (row) axis.
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  Tape<S>& t = *parts.front().tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.val(parts.front()).cols();
  bool req = false;
  for (const Var<S>& p : parts) {
    detail::check_same_tape(parts.front(), p, "concat_rows");
    const Mat<S>& pv = t.val(p);
    require_shape(pv.cols() == cols, "concat_rows", t.val(parts.front()), pv);
    rows += pv.rows();
    req = req || t.requires_grad(p);
  }
  Mat<S> y(rows, cols);
  Eigen::Index at = 0;
  for (const Var<S>& p : parts) {
    const Mat<S>& pv = t.val(p);
    y.middleRows(at, pv.rows()) = pv;
    at += pv.rows();
  }
  Var<S> out = detail::record(t, "concat_rows", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    std::vector<Var<S>> ins = parts;
    t.set_backward(out, [tp, ins, out] {
      const Mat<S>& dy = tp->grad(out);
      Eigen::Index at = 0;
      for (const Var<S>& p : ins) {
        const Eigen::Index n = tp->val(p).rows();
        if (tp->requires_grad(p)) tp->grad(p) += dy.middleRows(at, n);
        at += n;
      }
    });
  }
  return out;
}

// Splits x along the token axis into its first n_top rows and the rest.
template <typename S>
std::pair<Var<S>, Var<S>> split_rows(Var<S> x, Eigen::Index n_top) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.val(x);
  if (n_top < 0 || n_top > xv.rows()) {
    throw ShapeError("split_rows: boundary " + std::to_string(n_top) + " outside " +
                     shape_str(xv));
  }
  const bool req = t.requires_grad(x);
  Tape<S>* tp = &t;
  Var<S> top = detail::record(t, "split_rows", Mat<S>(xv.topRows(n_top)), req);
  if (req) {
    t.set_backward(top, [tp, x, top, n_top] {
      tp->grad(x).topRows(n_top) += tp->grad(top);
    });
  }
  const Eigen::Index n_bottom = xv.rows() - n_top;
  Var<S> bottom = detail::record(t, "split_rows", Mat<S>(xv.bottomRows(n_bottom)), req);
  if (req) {
    t.set_backward(bottom, [tp, x, bottom, n_bottom] {
      tp->grad(x).bottomRows(n_bottom) += tp->grad(bottom);
    });
  }
  return {top, bottom};
}

template <typename S>
Var<S> transpose(Var<S> x) {
  Tape<S>& t = *x.tape;
  const bool req = t.requires_grad(x);
  Var<S> out = detail::record(t, "transpose", Mat<S>(t.val(x).transpose()), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, x, out] { tp->grad(x) += tp->grad(out).transpose(); });
  }
  return out;
}

// Row-wise softmax with max-shift.
template <typename S>
Var<S> softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.val(x);
  Mat<S> y(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    const S m = xv.row(i).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (xv.row(i).array() - m).exp();
    y.row(i) = (e / e.sum()).matrix();
  }
  const bool req = t.requires_grad(x);
  Var<S> out = detail::record(t, "softmax", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, x, out] {
      const Mat<S>& dy = tp->grad(out);
      const Mat<S>& yv = tp->val(out);
      Eigen::Array<S, Eigen::Dynamic, 1> dots =
          (dy.array() * yv.array()).rowwise().sum();
      tp->grad(x) += (yv.array() * (dy.array().colwise() - dots)).matrix();
    });
  }
  return out;
}

template <typename S>
Var<S> silu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.val(x);
  Mat<S> sig = ((-xv.array()).exp() + S(1)).inverse().matrix();
  const bool req = t.requires_grad(x);
  Var<S> out = detail::record(t, "silu", Mat<S>(xv.cwiseProduct(sig)), req);
  if (req) {
    Tape<S>* tp = &t;
    auto saved = std::make_shared<Mat<S>>(std::move(sig));
    t.set_backward(out, [tp, x, out, saved] {
      const Mat<S>& dy = tp->grad(out);
      const Mat<S>& xv2 = tp->val(x);
      const auto sg = saved->array();
      tp->grad(x) +=
          (dy.array() * sg * (S(1) + xv2.array() * (S(1) - sg))).matrix();
    });
  }
  return out;
}

// Gathers table rows by id. Ids must lie in [0, table.rows()).
template <typename S>
Var<S> embedding_rows(Var<S> table, const std::vector<int>& ids) {
  Tape<S>& t = *table.tape;
  const Mat<S>& tv = t.val(table);
  Mat<S> y(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw Error("embedding_rows: id " + std::to_string(ids[i]) + " outside table with " +
                  std::to_string(tv.rows()) + " rows");
    }
    y.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  const bool req = t.requires_grad(table);
  Var<S> out = detail::record(t, "embedding_rows", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    auto saved = std::make_shared<std::vector<int>>(ids);
    t.set_backward(out, [tp, table, out, saved] {
      const Mat<S>& dy = tp->grad(out);
      Mat<S>& dt = tp->grad(table);
      for (std::size_t i = 0; i < saved->size(); ++i) {
        dt.row((*saved)[i]) += dy.row(static_cast<Eigen::Index>(i));
      }
    });
  }
  return out;
}

// y_i = x_i / sqrt(mean_j x_j^2 + eps) * gain_i, per token row.
template <typename S>
Var<S> rms_norm(Var<S> x, Var<S> gain, S eps) {
  detail::check_same_tape(x, gain, "rms_norm");
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.val(x);
  const Mat<S>& gv = t.val(gain);
  require_shape(gv.cols() == 1 && gv.rows() == xv.cols(), "rms_norm", xv, gv);
  if (xv.cols() < 1) throw ShapeError("rms_norm: empty feature dimension");
  if (!(eps >= S(0))) throw Error("rms_norm: eps must be non-negative");
  using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
  Arr inv_rms = (xv.array().square().rowwise().mean() + eps).rsqrt();
  Mat<S> y = ((xv.array().colwise() * inv_rms).rowwise() *
              gv.transpose().array().row(0))
                 .matrix();
  const bool req = t.requires_grad(x) || t.requires_grad(gain);
  Var<S> out = detail::record(t, "rms_norm", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    auto saved = std::make_shared<Arr>(std::move(inv_rms));
    t.set_backward(out, [tp, x, gain, out, saved] {
      const Mat<S>& dy = tp->grad(out);
      const Mat<S>& xv2 = tp->val(x);
      const Mat<S>& gv2 = tp->val(gain);
      const Arr& r = *saved;
      if (tp->requires_grad(x)) {
        const S d = static_cast<S>(xv2.cols());
        auto u = dy.array().rowwise() * gv2.transpose().array().row(0);
        Arr dot = (u * xv2.array()).rowwise().sum();
        Arr coef = dot * r.cube() / d;
        tp->grad(x) +=
            ((u.colwise() * r) - (xv2.array().colwise() * coef)).matrix();
      }
      if (tp->requires_grad(gain)) {
        tp->grad(gain) += ((dy.array() * xv2.array()).colwise() * r)
                              .colwise()
                              .sum()
                              .matrix()
                              .transpose();
      }
    });
  }
  return out;
}

namespace detail {

// cos/sin tables for rotary position pairs: entry (i, j) is for position i,
// rotation pair j. All heads share one table.
template <typename S>
struct RotaryTable {
  Mat<S> cos_t, sin_t;
};

template <typename S>
RotaryTable<S> rotary_table(Eigen::Index n_pos, Eigen::Index head_dim, double base) {
  const Eigen::Index pairs = head_dim / 2;
  RotaryTable<S> tab{Mat<S>(n_pos, pairs), Mat<S>(n_pos, pairs)};
  for (Eigen::Index j = 0; j < pairs; ++j) {
    const double theta = std::pow(base, -2.0 * static_cast<double>(j) /
                                            static_cast<double>(head_dim));
    for (Eigen::Index i = 0; i < n_pos; ++i) {
      const double a = static_cast<double>(i) * theta;
      tab.cos_t(i, j) = static_cast<S>(std::cos(a));
      tab.sin_t(i, j) = static_cast<S>(std::sin(a));
    }
  }
  return tab;
}

// Rotates adjacent feature pairs of each row by its position angle.
// sign = +1 applies the rotation, -1 its inverse (for gradients).
template <typename S>
Mat<S> rotate_pairs(const Eigen::Ref<const Mat<S>>& x, const RotaryTable<S>& tab, int sign) {
  Mat<S> y(x.rows(), x.cols());
  const Eigen::Index pairs = x.cols() / 2;
  for (Eigen::Index j = 0; j < pairs; ++j) {
    auto c = tab.cos_t.col(j).array();
    auto s = (S(sign) * tab.sin_t.col(j).array()).eval();
    auto x0 = x.col(2 * j).array();
    auto x1 = x.col(2 * j + 1).array();
    y.col(2 * j) = (c * x0 - s * x1).matrix();
    y.col(2 * j + 1) = (s * x0 + c * x1).matrix();
  }
  return y;
}

}  // namespace detail

// Causal multi-head scaled-dot-product attention over a fused (N, 3d)
// [query|key|value] projection, with rotary position encoding applied to
// queries and keys. Row i attends to positions 0..i.
template <typename S>
Var<S> causal_attention(Var<S> qkv, int n_heads, double rope_base) {
  Tape<S>& t = *qkv.tape;
  const Mat<S>& xv = t.val(qkv);
  if (xv.cols() % 3 != 0) {
    throw ShapeError("causal_attention: input cols " + std::to_string(xv.cols()) +
                     " not divisible into [q|k|v]");
  }
  const Eigen::Index d = xv.cols() / 3;
  if (n_heads < 1 || d % n_heads != 0) {
    throw ShapeError("causal_attention: model dim " + std::to_string(d) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const Eigen::Index dh = d / n_heads;
  if (dh % 2 != 0) {
    throw ShapeError("causal_attention: head dim " + std::to_string(dh) +
                     " must be even for rotary pairs");
  }
  const Eigen::Index n = xv.rows();
  const S inv_sqrt = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));

  struct Saved {
    detail::RotaryTable<S> rope;
    std::vector<Mat<S>> q_rot, k_rot, probs;
  };
  auto saved = std::make_shared<Saved>();
  saved->rope = detail::rotary_table<S>(n, dh, rope_base);

  Mat<S> y(n, d);
  for (int h = 0; h < n_heads; ++h) {
    Mat<S> qr = detail::rotate_pairs<S>(xv.block(0, h * dh, n, dh), saved->rope, +1);
    Mat<S> kr = detail::rotate_pairs<S>(xv.block(0, d + h * dh, n, dh), saved->rope, +1);
    Mat<S> scores(n, n);
    scores.noalias() = qr * kr.transpose();
    scores *= inv_sqrt;
    Mat<S> probs = Mat<S>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto prefix = scores.row(i).head(i + 1).array();
      const S m = prefix.maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (prefix - m).exp();
      probs.row(i).head(i + 1) = (e / e.sum()).matrix();
    }
    y.block(0, h * dh, n, dh).noalias() = probs * xv.block(0, 2 * d + h * dh, n, dh);
    saved->q_rot.push_back(std::move(qr));
    saved->k_rot.push_back(std::move(kr));
    saved->probs.push_back(std::move(probs));
  }

  const bool req = t.requires_grad(qkv);
  Var<S> out = detail::record(t, "causal_attention", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, qkv, out, saved, n_heads, d, dh, n, inv_sqrt] {
      const Mat<S>& dy = tp->grad(out);
      const Mat<S>& xv2 = tp->val(qkv);
      Mat<S>& dx = tp->grad(qkv);
      for (int h = 0; h < n_heads; ++h) {
        const Mat<S>& probs = saved->probs[h];
        const auto d_out = dy.block(0, h * dh, n, dh);
        dx.block(0, 2 * d + h * dh, n, dh).noalias() += probs.transpose() * d_out;
        Mat<S> d_probs(n, n);
        d_probs.noalias() = d_out * xv2.block(0, 2 * d + h * dh, n, dh).transpose();
        // softmax backward; masked entries have probs == 0 and drop out.
        Eigen::Array<S, Eigen::Dynamic, 1> dots =
            (d_probs.array() * probs.array()).rowwise().sum();
        Mat<S> d_scores =
            (probs.array() * (d_probs.array().colwise() - dots)).matrix() * inv_sqrt;
        Mat<S> dq_rot(n, dh), dk_rot(n, dh);
        dq_rot.noalias() = d_scores * saved->k_rot[h];
        dk_rot.noalias() = d_scores.transpose() * saved->q_rot[h];
        dx.block(0, h * dh, n, dh) +=
            detail::rotate_pairs<S>(dq_rot, saved->rope, -1);
        dx.block(0, d + h * dh, n, dh) +=
            detail::rotate_pairs<S>(dk_rot, saved->rope, -1);
      }
    });
  }
  return out;
}

// Per-row cross-entropy against integer targets: out is an (N, 1) vector of
// -log softmax(logits_i)[target_i].
template <typename S>
Var<S> cross_entropy_rows(Var<S> logits, const std::vector<int>& targets) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& lv = t.val(logits);
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows()) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(lv));
  }
  Mat<S> probs(lv.rows(), lv.cols());
  Mat<S> losses(lv.rows(), 1);
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= lv.cols()) {
      throw Error("cross_entropy_rows: target id " + std::to_string(tgt) +
                  " outside vocab of " + std::to_string(lv.cols()));
    }
    const S m = lv.row(i).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (lv.row(i).array() - m).exp();
    const S z = e.sum();
    probs.row(i) = (e / z).matrix();
    losses(i, 0) = std::log(z) + m - lv(i, tgt);
  }
  const bool req = t.requires_grad(logits);
  Var<S> out = detail::record(t, "cross_entropy_rows", std::move(losses), req);
  if (req) {
    Tape<S>* tp = &t;
    auto saved_probs = std::make_shared<Mat<S>>(std::move(probs));
    auto saved_tgts = std::make_shared<std::vector<int>>(targets);
    t.set_backward(out, [tp, logits, out, saved_probs, saved_tgts] {
      const Mat<S>& dy = tp->grad(out);
      Mat<S>& dl = tp->grad(logits);
      for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        dl.row(i) += dy(i, 0) * saved_probs->row(i);
        dl(i, (*saved_tgts)[static_cast<std::size_t>(i)]) -= dy(i, 0);
      }
    });
  }
  return out;
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Mat<S> y(1, 1);
  y(0, 0) = t.val(x).sum();
  const bool req = t.requires_grad(x);
  Var<S> out = detail::record(t, "sum_all", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    t.set_backward(out, [tp, x, out] {
      tp->grad(x).array() += tp->grad(out)(0, 0);
    });
  }
  return out;
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.val(x);
  if (xv.size() == 0) throw ShapeError("mean_all: empty input");
  Mat<S> y(1, 1);
  y(0, 0) = xv.mean();
  const bool req = t.requires_grad(x);
  Var<S> out = detail::record(t, "mean_all", std::move(y), req);
  if (req) {
    Tape<S>* tp = &t;
    const S inv = S(1) / static_cast<S>(xv.size());
    t.set_backward(out, [tp, x, out, inv] {
      tp->grad(x).array() += inv * tp->grad(out)(0, 0);
    });
  }
  return out;
}

}  // namespace loopformer
