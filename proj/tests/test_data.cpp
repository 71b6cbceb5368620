/*
 *  Copyright 2026 The semburn Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *       http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "semburn/data.hpp"
#include "semburn/errors.hpp"
#include "support.hpp"

using namespace semburn;

namespace {
const double NA = std::numeric_limits<double>::quiet_NaN();
}

TEST_CASE("bundled data sets load with model column order") {
  const auto pd = testing::load_bundled("political_democracy");
  CHECK(pd.data.n() == 75);
  CHECK(pd.data.p() == 11);
  CHECK(pd.data.columns.front() == "x1");
  const auto hs = testing::load_bundled("holzinger_swineford");
  CHECK(hs.data.n() == 301);
  CHECK(hs.data.p() == 9);
}

TEST_CASE("csv parsing details") {
  const std::vector<std::string> want{"b", "a"};
  const auto d = parse_csv("a,b,\"c,d\"\n1,2,x\nNA,5,y\n\"3\",nan,z\n", want);
  CHECK(d.n() == 3);
  CHECK(d.values(0, 0) == 2.0);
  CHECK(d.values(0, 1) == 1.0);
  CHECK(std::isnan(d.values(1, 1)));
  CHECK(d.values(1, 0) == 5.0);
  CHECK(d.values(2, 1) == 3.0);
  (void)d;
}

TEST_CASE("csv errors") {
  const std::vector<std::string> want{"a"};
  CHECK_THROWS_AS(parse_csv("a\n", want), DataError);
  CHECK_THROWS_AS(parse_csv("b\n1\n", want), DataError);
  CHECK_THROWS_AS(parse_csv("a\nfoo\n", want), DataError);
  CHECK_THROWS_AS(parse_csv("a,b\nNA,1\n", want), DataError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv", want), DataError);
}

TEST_CASE("rfc 4180 quoting") {
  const auto f = split_csv_record("1,\"a,b\",\"say \"\"hi\"\"\",");
  REQUIRE(f.size() == 4);
  CHECK(f[1] == "a,b");
  CHECK(f[2] == "say \"hi\"");
  CHECK(f[3].empty());
}

TEST_CASE("complete data forms one group with full-sample statistics") {
  const auto hs = testing::load_bundled("holzinger_swineford");
  const auto g = group_patterns(hs.data);
  REQUIRE(g.size() == 1);
  CHECK(g[0].count() == 301);
  const Eigen::VectorXd mean = hs.data.values.colwise().mean();
  const Eigen::MatrixXd centred = hs.data.values.rowwise() - mean.transpose();
  CHECK((g[0].mean - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((g[0].crossprod - centred.transpose() * centred).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("hand-enumerated patterns") {
  Eigen::MatrixXd v(4, 2);
  v << 1.0, NA, NA, 2.0, 3.0, 4.0, 5.0, 6.0;
  const auto d = make_dataset({"a", "b"}, v);
  const auto g = group_patterns(d);
  REQUIRE(g.size() == 3);
  CHECK(g[0].count() == 2);
  CHECK(g[0].observed_idx == std::vector<int>{0, 1});
  CHECK(g[0].mean(0) == doctest::Approx(4.0));
  CHECK(g[0].crossprod(0, 1) == doctest::Approx(2.0));
  // equal counts: ascending mask string, so "01" (b only) precedes "10"
  CHECK(g[1].observed_idx == std::vector<int>{1});
  CHECK(g[2].observed_idx == std::vector<int>{0});
}

TEST_CASE("groups partition the rows and are independent") {
  const auto hs = testing::load_bundled("holzinger_swineford");
  std::mt19937_64 rng(11);
  std::bernoulli_distribution drop(0.2);
  Eigen::MatrixXd v = hs.data.values;
  for (int r = 0; r < v.rows(); ++r) {
    for (int c = 0; c < v.cols(); ++c)
      if (drop(rng)) v(r, c) = NA;
    if (v.row(r).array().isNaN().all()) v(r, 0) = 1.0;
  }
  const auto d = make_dataset(hs.data.columns, v);
  const auto groups = group_patterns(d);
  std::vector<int> all;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    all.insert(all.end(), groups[i].row_indices.begin(), groups[i].row_indices.end());
    if (i > 0) CHECK(groups[i - 1].count() >= groups[i].count());
  }
  std::sort(all.begin(), all.end());
  std::vector<int> expect(d.n());
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);

  // dropping the rows of one group leaves the other groups' statistics unchanged
  const auto& victim = groups.back();
  std::vector<int> keep;
  for (int r = 0; r < d.n(); ++r)
    if (std::find(victim.row_indices.begin(), victim.row_indices.end(), r) == victim.row_indices.end())
      keep.push_back(r);
  Eigen::MatrixXd reduced(keep.size(), d.p());
  for (std::size_t i = 0; i < keep.size(); ++i) reduced.row(i) = v.row(keep[i]);
  const auto regrouped = group_patterns(make_dataset(d.columns, reduced));
  CHECK(regrouped.size() == groups.size() - 1);
  for (const auto& g : regrouped) {
    const auto it = std::find_if(groups.begin(), groups.end(),
                                 [&](const PatternGroup& o) { return o.observed_idx == g.observed_idx; });
    REQUIRE(it != groups.end());
    CHECK(it->count() == g.count());
    CHECK((it->mean - g.mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK((it->crossprod - g.crossprod).cwiseAbs().maxCoeff() == 0.0);
  }
}
