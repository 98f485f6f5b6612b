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

#include <doctest.h>

#include <vector>

#include "loopformer/loss.hpp"
#include "loopformer/rng.hpp"

using loopformer::LossConfig;
using loopformer::LossVariant;
using loopformer::MatD;
using loopformer::Rng;
using loopformer::Tape;
using loopformer::Var;
namespace lf = loopformer;

namespace {

MatD column(std::initializer_list<double> xs) {
  MatD m(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}

// Brute-force re-computation of the combined objective, one token at a time.
double ref_total(const std::vector<MatD>& steps, const std::vector<std::uint8_t>& mask,
                 const LossConfig& cfg) {
  Eigen::Index m_count = 0;
  for (auto b : mask) m_count += (b != 0);
  double total = 0.0;
  for (std::size_t r = 0; r < steps.size(); ++r) {
    if (cfg.variant == LossVariant::final_step_only && r + 1 != steps.size()) continue;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < steps[r].rows(); ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      double li = steps[r](i, 0);
      if (cfg.variant == LossVariant::monotonic && r >= 1 && li > steps[r - 1](i, 0)) {
        li *= cfg.beta;
      }
      acc += li;
    }
    total += acc / static_cast<double>(m_count);
  }
  return total;
}

}  // namespace

TEST_SUITE_BEGIN("loss");

TEST_CASE("per-token adjustment fires only on strict degradation") {
  MatD cur = column({0.7, 0.2});
  MatD prev = column({0.5, 0.4});
  MatD adj = lf::monotonic_adjust<double>(cur, prev, 1.5);
  CHECK(adj(0, 0) == doctest::Approx(1.05).epsilon(1e-12));
  CHECK(adj(1, 0) == doctest::Approx(0.2).epsilon(1e-12));

  MatD tied = lf::monotonic_adjust<double>(cur, cur, 1.5);
  CHECK((tied - cur).cwiseAbs().maxCoeff() == 0.0);

  MatD unit_beta = lf::monotonic_adjust<double>(cur, prev, 1.0);
  CHECK((unit_beta - cur).cwiseAbs().maxCoeff() == 0.0);

  MatD bad = column({0.1});
  CHECK_THROWS_AS(lf::monotonic_adjust<double>(cur, bad, 1.5), lf::ShapeError);
}

TEST_CASE("single step reduces to the masked mean for every variant") {
  MatD losses = column({1.0, 2.0, 3.0, 4.0});
  std::vector<std::uint8_t> mask = {1, 0, 1, 0};
  for (LossVariant v :
       {LossVariant::final_step_only, LossVariant::each_step, LossVariant::monotonic}) {
    Tape<double> t;
    LossConfig cfg{v, 1.5};
    auto [total, bd] = lf::total_loss(t, {t.constant(losses)}, mask, cfg);
    CHECK(t.val(total)(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(bd.total == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(bd.degraded_fraction[0] == 0.0);
  }
}

TEST_CASE("no degradation means no penalty") {
  MatD step1 = column({1.0, 0.8, 0.6});
  MatD step2 = column({0.9, 0.8, 0.1});  // one tie, improvements otherwise
  std::vector<std::uint8_t> mask = {1, 1, 1};
  Tape<double> t;
  LossConfig cfg{LossVariant::monotonic, 1.5};
  auto [total, bd] = lf::total_loss(t, {t.constant(step1), t.constant(step2)}, mask, cfg);
  const double want = (1.0 + 0.8 + 0.6) / 3.0 + (0.9 + 0.8 + 0.1) / 3.0;
  CHECK(t.val(total)(0, 0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(bd.degraded_fraction[1] == 0.0);
  CHECK(bd.per_step_adjusted[1] == doctest::Approx(bd.per_step_raw[1]).epsilon(1e-12));
}

TEST_CASE("uniform degradation scales the whole second step by beta") {
  MatD step1 = column({0.5, 0.5});
  MatD step2 = column({0.6, 1.5});
  std::vector<std::uint8_t> mask = {1, 1};
  Tape<double> t;
  LossConfig cfg{LossVariant::monotonic, 1.5};
  auto [total, bd] = lf::total_loss(t, {t.constant(step1), t.constant(step2)}, mask, cfg);
  const double want = 0.5 + 1.5 * (0.6 + 1.5) / 2.0;
  CHECK(t.val(total)(0, 0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(bd.degraded_fraction[1] == 1.0);
}

TEST_CASE("random cases match the brute-force oracle for all variants") {
  Rng rng(60);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 6;
    std::vector<MatD> steps;
    const int n_steps = 1 + static_cast<int>(rng.below(3));
    for (int r = 0; r < n_steps; ++r) {
      MatD l(n, 1);
      for (Eigen::Index i = 0; i < n; ++i) l(i, 0) = rng.uniform() * 3.0;
      steps.push_back(l);
    }
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
    bool any = false;
    for (auto& m : mask) {
      m = rng.uniform() < 0.6 ? 1 : 0;
      any = any || m;
    }
    if (!any) mask[0] = 1;

    for (LossVariant v :
         {LossVariant::final_step_only, LossVariant::each_step, LossVariant::monotonic}) {
      LossConfig cfg{v, 1.5};
      Tape<double> t;
      std::vector<Var<double>> vars;
      for (const MatD& s : steps) vars.push_back(t.constant(s));
      auto [total, bd] = lf::total_loss(t, vars, mask, cfg);
      CHECK(t.val(total)(0, 0) == doctest::Approx(ref_total(steps, mask, cfg)).epsilon(1e-12));
      double from_steps = 0.0;
      for (double a : bd.per_step_adjusted) from_steps += a;
      CHECK(bd.total == doctest::Approx(from_steps).epsilon(1e-12));
      for (std::size_t r = 1; r < bd.per_step_adjusted.size(); ++r) {
        if (v == LossVariant::monotonic) {
          CHECK(bd.per_step_adjusted[r] >= bd.per_step_raw[r] - 1e-15);
        }
      }
    }
  }
}

TEST_CASE("penalized total dominates the unpenalized total") {
  Rng rng(61);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index n = 5;
    MatD s1(n, 1), s2(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      s1(i, 0) = rng.uniform() * 2.0;
      s2(i, 0) = rng.uniform() * 2.0;
    }
    std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1};
    Tape<double> t1, t2;
    auto [mono, bd1] = lf::total_loss(t1, {t1.constant(s1), t1.constant(s2)}, mask,
                                      {LossVariant::monotonic, 1.5});
    auto [each, bd2] = lf::total_loss(t2, {t2.constant(s1), t2.constant(s2)}, mask,
                                      {LossVariant::each_step, 1.5});
    const double m = t1.val(mono)(0, 0), e = t2.val(each)(0, 0);
    CHECK(m >= e - 1e-15);
    if (bd1.degraded_fraction[1] == 0.0) {
      CHECK(m == doctest::Approx(e).epsilon(1e-12));
    } else {
      CHECK(m > e);
    }
  }
}

TEST_CASE("gradient flows into current losses scaled by the penalty, never into prev") {
  // step1 = (0.5, 0.5, 0.5), step2 = (0.9, 0.2, 0.5): degraded, improved, tied.
  MatD v1 = column({0.5, 0.5, 0.5});
  MatD v2 = column({0.9, 0.2, 0.5});
  MatD g1 = MatD::Zero(3, 1), g2 = MatD::Zero(3, 1);
  std::vector<std::uint8_t> mask = {1, 1, 1};
  Tape<double> t;
  Var<double> l1 = t.leaf(v1, &g1);
  Var<double> l2 = t.leaf(v2, &g2);
  auto [total, bd] = lf::total_loss(t, {l1, l2}, mask, {LossVariant::monotonic, 1.5});
  t.backward(total);

  // Step-2 gradients: beta/3 where degraded, 1/3 elsewhere.
  CHECK(g2(0, 0) == doctest::Approx(1.5 / 3.0).epsilon(1e-12));
  CHECK(g2(1, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(g2(2, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  // Step-1 gradients come only from its own raw term; the comparison is
  // not a gradient path.
  for (int i = 0; i < 3; ++i) CHECK(g1(i, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(bd.degraded_fraction[1] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("batch aggregation via the denominator override matches the joint mean") {
  // Two samples with 2 and 3 masked tokens; batch masked mean divides by 5.
  MatD a1 = column({0.4, 1.0});
  MatD a2 = column({0.6, 0.8});
  MatD b1 = column({0.1, 0.2, 0.3});
  MatD b2 = column({0.5, 0.1, 0.3});
  std::vector<std::uint8_t> mask_a = {1, 1}, mask_b = {1, 1, 1};
  LossConfig cfg{LossVariant::monotonic, 1.5};

  Tape<double> ta, tb;
  auto [ta_total, bda] =
      lf::total_loss(ta, {ta.constant(a1), ta.constant(a2)}, mask_a, cfg, 5);
  auto [tb_total, bdb] =
      lf::total_loss(tb, {tb.constant(b1), tb.constant(b2)}, mask_b, cfg, 5);
  const double combined = ta.val(ta_total)(0, 0) + tb.val(tb_total)(0, 0);

  // Joint computation over the concatenated tokens.
  MatD j1 = column({0.4, 1.0, 0.1, 0.2, 0.3});
  MatD j2 = column({0.6, 0.8, 0.5, 0.1, 0.3});
  Tape<double> tj;
  auto [tj_total, bdj] =
      lf::total_loss(tj, {tj.constant(j1), tj.constant(j2)}, {1, 1, 1, 1, 1}, cfg);
  CHECK(combined == doctest::Approx(tj.val(tj_total)(0, 0)).epsilon(1e-12));
  CHECK(bda.degraded_fraction[1] + bdb.degraded_fraction[1] ==
        doctest::Approx(bdj.degraded_fraction[1]).epsilon(1e-12));
}

TEST_CASE("degenerate inputs are rejected") {
  Tape<double> t;
  MatD l = column({1.0, 2.0});
  CHECK_THROWS_AS(lf::total_loss(t, {t.constant(l)}, {0, 0}, LossConfig{}), lf::Error);
  CHECK_THROWS_AS(lf::total_loss(t, {t.constant(l)}, {1, 1, 1}, LossConfig{}),
                  lf::ShapeError);
  CHECK_THROWS_AS(lf::total_loss(t, {}, {1}, LossConfig{}), lf::ConfigError);
  LossConfig bad;
  bad.beta = 0.5;
  CHECK_THROWS_AS(lf::total_loss(t, {t.constant(l)}, {1, 1}, bad), lf::ConfigError);
}

TEST_SUITE_END();
