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

#include <Eigen/QR>

#include <vector>

#include "loopformer/data.hpp"
#include "loopformer/diagnostics.hpp"
#include "loopformer/rng.hpp"

using loopformer::MatD;
using loopformer::Rng;
namespace lf = loopformer;

TEST_SUITE_BEGIN("diagnostics");

TEST_CASE("layer norms are per-token means") {
  std::vector<MatD> zeros = {MatD::Zero(4, 3), MatD::Zero(4, 3)};
  for (double v : lf::layer_l2_norms(zeros)) CHECK(v == 0.0);

  MatD single(1, 2);
  single << 3.0, 4.0;
  CHECK(lf::layer_l2_norms<double>({single})[0] == doctest::Approx(5.0).epsilon(1e-12));

  MatD two(2, 2);
  two << 1.0, 0.0, 0.0, 2.0;
  CHECK(lf::layer_l2_norms<double>({two})[0] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("alignment score is one for a representation against itself") {
  Rng rng(70);
  MatD x = rng.normal_matrix<double>(40, 6, 1.0);
  CHECK(lf::linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("alignment is invariant to rotation and scaling") {
  Rng rng(71);
  MatD x = rng.normal_matrix<double>(50, 8, 1.0);
  MatD raw = rng.normal_matrix<double>(8, 8, 1.0);
  Eigen::HouseholderQR<MatD> qr(raw);
  MatD q = qr.householderQ() * MatD::Identity(8, 8);
  CHECK(lf::linear_cka<double>(x, MatD(x * q)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(lf::linear_cka<double>(x, MatD(-2.7 * x)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("alignment is symmetric") {
  Rng rng(72);
  MatD x = rng.normal_matrix<double>(30, 5, 1.0);
  MatD y = rng.normal_matrix<double>(30, 7, 1.0);
  CHECK(lf::linear_cka(x, y) == doctest::Approx(lf::linear_cka(y, x)).epsilon(1e-9));
  const double v = lf::linear_cka(x, y);
  CHECK(v >= 0.0);
  CHECK(v <= 1.0 + 1e-9);
}

TEST_CASE("independent representations score near zero") {
  Rng rng(73);
  MatD x = rng.normal_matrix<double>(1000, 50, 1.0);
  MatD y = rng.normal_matrix<double>(1000, 50, 1.0);
  CHECK(lf::linear_cka(x, y) < 0.1);
}

TEST_CASE("alignment rejects degenerate inputs") {
  MatD x = MatD::Ones(10, 3);  // zero variance after centering
  MatD y = MatD::Random(10, 3);
  CHECK_THROWS_AS(lf::linear_cka(x, y), lf::Error);
  MatD one_row = MatD::Random(1, 3);
  CHECK_THROWS_AS(lf::linear_cka(one_row, one_row), lf::Error);
  MatD mismatched = MatD::Random(9, 3);
  CHECK_THROWS_AS(lf::linear_cka(y, mismatched), lf::ShapeError);
}

TEST_CASE("zero-initialized model reports identical steps") {
  lf::ModelConfig mc;
  mc.vocab = 16;
  mc.dim = 12;
  mc.n_layers = 3;
  mc.n_heads = 2;
  mc.mlp_ratio = 2;
  mc.patch_dim = 7;
  mc.recursion_steps = 2;
  mc.connector_layers = 2;
  mc.connector_hidden = 12;
  lf::TaskConfig task;
  task.grid_size = 2;
  task.color_count = 3;

  lf::ModelParams<double> params = lf::init_model<double>(mc, 91);
  std::vector<lf::MultimodalBatch<double>> slice;
  for (int i = 0; i < 8; ++i) slice.push_back(lf::gen_sample<double>(task, 5, i));

  auto reports = lf::run_diagnostics(params, slice, 2, 4096, 123, "fp");
  REQUIRE(reports.size() == 2);
  for (const auto& rep : reports) {
    CHECK(rep.per_layer_cka[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rep.sample_count == 8);
    for (double n : rep.per_layer_norm) {
      CHECK(n > 0.0);
      CHECK(std::isfinite(n));
    }
    for (double ck : rep.per_layer_cka) {
      CHECK(ck >= 0.0);
      CHECK(ck <= 1.0 + 1e-9);
    }
  }
  for (std::size_t l = 0; l < reports[0].per_layer_norm.size(); ++l) {
    CHECK(reports[0].per_layer_norm[l] == reports[1].per_layer_norm[l]);
    CHECK(reports[0].per_layer_cka[l] == reports[1].per_layer_cka[l]);
  }

  SUBCASE("repeat runs are bit-identical") {
    auto again = lf::run_diagnostics(params, slice, 2, 4096, 123, "fp");
    for (std::size_t r = 0; r < reports.size(); ++r) {
      CHECK(reports[r].per_layer_norm == again[r].per_layer_norm);
      CHECK(reports[r].per_layer_cka == again[r].per_layer_cka);
    }
  }
  SUBCASE("subsampling caps the pooled rows deterministically") {
    auto capped = lf::run_diagnostics(params, slice, 2, 64, 123, "fp");
    auto capped2 = lf::run_diagnostics(params, slice, 2, 64, 123, "fp");
    CHECK(capped[0].per_layer_cka == capped2[0].per_layer_cka);
    CHECK(capped[0].per_layer_cka[0] == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_SUITE_END();
