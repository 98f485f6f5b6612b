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

#include <cstdio>
#include <fstream>
#include <set>
#include <vector>

#include <json.hpp>

#include "loopformer/data.hpp"

using loopformer::MatD;
using loopformer::MultimodalBatch;
using loopformer::TaskConfig;
namespace lf = loopformer;

TEST_SUITE_BEGIN("data");

TEST_CASE("generation is a pure function of seed and index") {
  TaskConfig cfg;
  cfg.task = lf::Task::grid_color;
  for (int trial = 0; trial < 5; ++trial) {
    auto a = lf::gen_sample<double>(cfg, 9, static_cast<std::uint64_t>(trial));
    auto b = lf::gen_sample<double>(cfg, 9, static_cast<std::uint64_t>(trial));
    CHECK((a.raw_patches - b.raw_patches).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.text_ids == b.text_ids);
    CHECK(a.targets == b.targets);
    CHECK(a.loss_mask == b.loss_mask);
  }
  auto first = lf::gen_sample<double>(cfg, 9, 0);
  bool any_diff = false;
  for (std::uint64_t i = 1; i < 10; ++i) {
    auto other = lf::gen_sample<double>(cfg, 9, i);
    any_diff = any_diff || other.text_ids != first.text_ids ||
               (other.raw_patches - first.raw_patches).cwiseAbs().maxCoeff() > 0.0;
  }
  CHECK(any_diff);
}

TEST_CASE("grid task geometry and answer consistency") {
  TaskConfig cfg;
  cfg.grid_size = 4;
  cfg.color_count = 8;
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto s = lf::gen_grid_color<double>(cfg, 3, i);
    CHECK(s.raw_patches.rows() == 16);
    CHECK(s.raw_patches.cols() == 8 + 2 * 4);
    // Each patch is exactly three one-hot groups.
    for (Eigen::Index r = 0; r < 16; ++r) {
      CHECK(s.raw_patches.row(r).sum() == 3.0);
    }
    REQUIRE(s.text_ids.size() == 4);
    CHECK(s.text_ids[0] == TaskConfig::kBos);
    CHECK(s.text_ids[2] == TaskConfig::kAnswer);
    CHECK(s.loss_mask == std::vector<std::uint8_t>{0, 0, 1, 0});
    // The masked target equals the color encoded in the queried patch.
    const int query = s.text_ids[1] - TaskConfig::kValueBase - cfg.color_count;
    CHECK(query >= 0);
    CHECK(query < 16);
    int color = -1;
    for (int c = 0; c < cfg.color_count; ++c) {
      if (s.raw_patches(query, c) == 1.0) color = c;
    }
    CHECK(s.targets[2] == TaskConfig::kValueBase + color);
    CHECK(s.targets[2] == s.text_ids[3]);
  }
}

TEST_CASE("single-cell single-color grid is constant") {
  TaskConfig cfg;
  cfg.grid_size = 1;
  cfg.color_count = 1;
  for (std::uint64_t i = 0; i < 5; ++i) {
    auto s = lf::gen_grid_color<double>(cfg, 1, i);
    CHECK(s.targets[2] == TaskConfig::kValueBase);
    CHECK(s.raw_patches.rows() == 1);
  }
}

TEST_CASE("text-only ablation removes the vision tokens") {
  TaskConfig cfg;
  cfg.text_only = true;
  auto s = lf::gen_grid_color<double>(cfg, 2, 0);
  CHECK(s.raw_patches.rows() == 0);
  CHECK(s.text_ids.size() == 4);

  TaskConfig vis = cfg;
  vis.text_only = false;
  auto sv = lf::gen_grid_color<double>(vis, 2, 0);
  // Same underlying sample, just without the patches.
  CHECK(s.text_ids == sv.text_ids);
  CHECK(s.targets == sv.targets);
}

TEST_CASE("grid answers are uniform over colors") {
  TaskConfig cfg;
  cfg.grid_size = 4;
  cfg.color_count = 8;
  std::vector<int> counts(8, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto s = lf::gen_grid_color<double>(cfg, 17, static_cast<std::uint64_t>(i));
    counts[static_cast<std::size_t>(s.targets[2] - TaskConfig::kValueBase)] += 1;
  }
  const double expected = static_cast<double>(n) / 8.0;
  double chi2 = 0.0;
  for (int c : counts) {
    const double d = c - expected;
    chi2 += d * d / expected;
  }
  // 0.99 quantile of chi-squared with 7 degrees of freedom.
  CHECK(chi2 < 18.4753);
}

TEST_CASE("copy task echoes its span after the separator") {
  TaskConfig cfg;
  cfg.task = lf::Task::copy;
  cfg.span_len = 4;
  cfg.modulus = 9;
  for (std::uint64_t i = 0; i < 20; ++i) {
    auto s = lf::gen_copy<double>(cfg, 4, i);
    const int k = cfg.span_len;
    REQUIRE(static_cast<int>(s.text_ids.size()) == 2 * k + 2);
    CHECK(s.raw_patches.rows() == 0);
    CHECK(s.text_ids[0] == TaskConfig::kBos);
    CHECK(s.text_ids[static_cast<std::size_t>(k) + 1] == TaskConfig::kSep);
    int masked = 0;
    for (std::size_t p = 0; p < s.text_ids.size(); ++p) {
      if (s.loss_mask[p]) {
        ++masked;
        CHECK(s.targets[p] == s.text_ids[p + 1]);
      }
    }
    CHECK(masked == k);
    for (int j = 0; j < k; ++j) {
      CHECK(s.text_ids[static_cast<std::size_t>(k + 2 + j)] ==
            s.text_ids[static_cast<std::size_t>(1 + j)]);
    }
  }
}

TEST_CASE("length-one copy predicts its only token") {
  TaskConfig cfg;
  cfg.task = lf::Task::copy;
  cfg.span_len = 1;
  cfg.modulus = 5;
  auto s = lf::gen_copy<double>(cfg, 6, 3);
  REQUIRE(s.text_ids.size() == 4);
  CHECK(s.loss_mask == std::vector<std::uint8_t>{0, 0, 1, 0});
  CHECK(s.targets[2] == s.text_ids[1]);
}

TEST_CASE("modular addition emits the right answer token") {
  TaskConfig cfg;
  cfg.task = lf::Task::modadd;
  cfg.modulus = 7;
  bool found_5_4 = false, found_zero_a = false;
  for (std::uint64_t i = 0; i < 400 && !(found_5_4 && found_zero_a); ++i) {
    auto s = lf::gen_modadd<double>(cfg, 8, i);
    const int a = s.text_ids[1] - TaskConfig::kValueBase;
    const int b = s.text_ids[2] - TaskConfig::kValueBase;
    CHECK(s.targets[3] == TaskConfig::kValueBase + (a + b) % 7);
    CHECK(s.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 0});
    if (a == 5 && b == 4) {
      CHECK(s.targets[3] == TaskConfig::kValueBase + 2);
      found_5_4 = true;
    }
    if (a == 0) {
      CHECK(s.targets[3] == s.text_ids[2]);
      found_zero_a = true;
    }
  }
  CHECK(found_5_4);
  CHECK(found_zero_a);
}

TEST_CASE("splits are disjoint, sized, and stable") {
  auto s1 = lf::make_split(5, 100, 20);
  auto s2 = lf::make_split(5, 100, 20);
  CHECK(s1.train.size() == 100);
  CHECK(s1.eval.size() == 20);
  CHECK(s1.train == s2.train);
  CHECK(s1.eval == s2.eval);
  std::set<std::uint64_t> all(s1.train.begin(), s1.train.end());
  for (std::uint64_t e : s1.eval) {
    CHECK(all.count(e) == 0);
    all.insert(e);
  }
  CHECK(all.size() == 120);
  CHECK_THROWS_AS(lf::make_split(5, 0, 1), lf::ConfigError);
}

TEST_CASE("jsonl export round-trips sample fields") {
  TaskConfig cfg;
  cfg.grid_size = 2;
  cfg.color_count = 3;
  const std::string path = "test_export.jsonl";
  lf::export_jsonl<double>(path, cfg, 12, {0, 1, 2});

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    const std::uint64_t idx = j.at("index").get<std::uint64_t>();
    auto want = lf::gen_sample<double>(cfg, 12, idx);
    CHECK(j.at("text_ids").get<std::vector<int>>() == want.text_ids);
    CHECK(j.at("targets").get<std::vector<int>>() == want.targets);
    auto patches = j.at("raw_patches").get<std::vector<std::vector<double>>>();
    REQUIRE(static_cast<Eigen::Index>(patches.size()) == want.raw_patches.rows());
    for (Eigen::Index r = 0; r < want.raw_patches.rows(); ++r) {
      for (Eigen::Index c = 0; c < want.raw_patches.cols(); ++c) {
        CHECK(patches[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] ==
              want.raw_patches(r, c));
      }
    }
    ++rows;
  }
  CHECK(rows == 3);
  std::remove(path.c_str());
}

TEST_SUITE_END();
