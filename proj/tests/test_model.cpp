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
#include <numeric>
#include <random>

#include "semburn/errors.hpp"
#include "semburn/model.hpp"
#include "support.hpp"

using namespace semburn;

namespace {

CompiledModel bundled_model(const std::string& name) {
  const auto text = testing::slurp(testing::source_dir() / "models" / (name + ".lav"));
  return compile_model(text, referenced_observed(parse_model(text)));
}

int free_slots(const SlotMatrix& s) {
  int n = 0;
  for (int i = 0; i < s.rows(); ++i)
    for (int j = 0; j < s.cols(); ++j) n += s(i, j).is_free();
  return n;
}

// brute force: some permutation makes the pattern strictly lower triangular
bool recursive_by_permutation(const Eigen::MatrixXi& pattern) {
  const int m = static_cast<int>(pattern.rows());
  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  do {
    bool ok = true;
    for (int i = 0; i < m && ok; ++i)
      for (int j = i; j < m && ok; ++j)
        if (pattern(perm[i], perm[j])) ok = false;
    if (ok) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

}  // namespace

TEST_CASE("political democracy templates") {
  const auto c = bundled_model("political_democracy");
  const auto& t = c.templates;
  CHECK(t.p == 11);
  CHECK(t.m == 3);
  CHECK(free_slots(t.lambda) == 8);
  int fixed_one = 0;
  for (int i = 0; i < t.p; ++i)
    for (int j = 0; j < t.m; ++j)
      if (!t.lambda(i, j).is_free() && t.lambda(i, j).value == 1.0) ++fixed_one;
  CHECK(fixed_one == 3);
  CHECK(free_slots(t.beta) == 3);
  CHECK(t.beta(1, 0).is_free());  // dem60 <- ind60
  CHECK(t.beta(2, 0).is_free());  // dem65 <- ind60
  CHECK(t.beta(2, 1).is_free());  // dem65 <- dem60
  CHECK(t.free_count() == 42);

  CHECK(c.flags.b_recursive);
  CHECK(c.flags.permutation == std::vector<int>{0, 1, 2});
  CHECK(c.flags.psi_diagonal);
  CHECK_FALSE(c.flags.theta_diagonal);
}

TEST_CASE("Holzinger-Swineford structure") {
  const auto c = bundled_model("holzinger_swineford");
  CHECK(c.templates.free_count() == 30);
  CHECK(free_slots(c.templates.beta) == 0);
  CHECK(c.flags.b_recursive);
  CHECK_FALSE(c.flags.psi_diagonal);
  CHECK(c.flags.theta_diagonal);
}

TEST_CASE("growth model shares representative indices across waves") {
  const auto c = bundled_model("milcs");
  const auto& t = c.templates;
  CHECK(t.free_count() == 15);
  for (int k = 0; k < 3; ++k) {
    const int i1 = static_cast<int>(std::find(t.observed.begin(), t.observed.end(), "T1X" + std::to_string(k + 1)) -
                                    t.observed.begin());
    const int i2 = static_cast<int>(std::find(t.observed.begin(), t.observed.end(), "T2X" + std::to_string(k + 1)) -
                                    t.observed.begin());
    CHECK(t.theta_sd[i1].index == t.theta_sd[i2].index);
    CHECK(t.theta_sd[i1].is_free());
  }
  CHECK(c.flags.b_recursive);
}

TEST_CASE("two-cycle in B is not recursive") {
  const std::vector<std::string> obs{"x1", "x2", "x3", "x4"};
  const auto c = compile_model("f1 =~ x1 + x2\nf2 =~ x3 + x4\nf1 ~ f2\nf2 ~ f1", obs);
  CHECK_FALSE(c.flags.b_recursive);
}

TEST_CASE("recursion flag agrees with permutation search") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 300; ++rep) {
    const int m = 1 + static_cast<int>(rng() % 6);
    std::string text;
    std::vector<std::string> obs;
    for (int j = 0; j < m; ++j) {
      text += "f" + std::to_string(j) + " =~ y" + std::to_string(j) + "\n";
      obs.push_back("y" + std::to_string(j));
    }
    Eigen::MatrixXi pattern = Eigen::MatrixXi::Zero(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        if (i != j && rng() % 4 == 0) {
          pattern(i, j) = 1;
          text += "f" + std::to_string(i) + " ~ f" + std::to_string(j) + "\n";
        }
    const auto c = compile_model(text, obs);
    CAPTURE(text);
    CHECK(c.flags.b_recursive == recursive_by_permutation(pattern));
    if (c.flags.b_recursive) {
      for (int a = 0; a < m; ++a)
        for (int b = a; b < m; ++b) CHECK(pattern(c.flags.permutation[a], c.flags.permutation[b]) == 0);
    }
  }
}

TEST_CASE("assemble identity point") {
  const auto c = bundled_model("holzinger_swineford");
  const auto& t = c.templates;
  std::vector<double> x(t.free_count(), 0.0);
  for (const auto& s : t.theta_sd)
    if (s.is_free()) x[s.index] = 1.0;
  for (const auto& s : t.psi_sd)
    if (s.is_free()) x[s.index] = 1.0;
  const auto sm = assemble(t, x);
  CHECK(sm.theta.isApprox(Eigen::MatrixXd::Identity(9, 9)));
  CHECK(sm.psi.isApprox(Eigen::MatrixXd::Identity(3, 3)));
  CHECK(sm.beta.isZero());
}

TEST_CASE("assemble copies equality representatives exactly and round-trips") {
  const auto c = bundled_model("milcs");
  const auto& t = c.templates;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::vector<double> x(t.free_count());
  for (auto& v : x) v = u(rng);
  const auto sm = assemble(t, x);
  const auto i12 = std::find(t.observed.begin(), t.observed.end(), "T1X2") - t.observed.begin();
  const auto i22 = std::find(t.observed.begin(), t.observed.end(), "T2X2") - t.observed.begin();
  CHECK(sm.theta(i12, i12) == sm.theta(i22, i22));
  const Eigen::VectorXd back = extract_free(t, sm);
  for (int k = 0; k < t.free_count(); ++k) CHECK(back(k) == x[k]);
}

TEST_CASE("assemble rejects bad input") {
  const auto c = bundled_model("political_democracy");
  std::vector<double> short_vec(3, 0.5);
  CHECK_THROWS(assemble(c.templates, short_vec));
  std::vector<double> x(c.templates.free_count(), 0.5);
  const auto& slot = c.templates.theta_cor;
  int cor_index = -1;
  for (int i = 0; i < slot.rows() && cor_index < 0; ++i)
    for (int j = i + 1; j < slot.cols(); ++j)
      if (slot(i, j).is_free()) {
        cor_index = slot(i, j).index;
        break;
      }
  REQUIRE(cor_index >= 0);
  x[cor_index] = 1.5;
  CHECK_THROWS(assemble(c.templates, x));
}

TEST_CASE("latent-observed covariance is unsupported") {
  const std::vector<std::string> obs{"x1", "x2", "x3"};
  CHECK_THROWS_AS(compile_model("f =~ x1 + x2\nf ~~ x3", obs), ModelError);
}

TEST_CASE("model with no latent variables") {
  const std::vector<std::string> obs{"a", "b"};
  const auto c = compile_model("a ~~ b", obs);
  CHECK(c.templates.m == 0);
  CHECK(c.templates.p == 2);
  CHECK(c.templates.free_count() == 5);
}
