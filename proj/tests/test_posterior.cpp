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
#include <random>

#include "semburn/posterior.hpp"
#include "support.hpp"
#include "verify.hpp"

using namespace semburn;

namespace {

// two variance-scaled factors with a free inter-factor correlation
const char* kTwoFactor =
    "f1 =~ NA*y1 + y2 + y3\n"
    "f2 =~ NA*y4 + y5 + y6\n"
    "f1 ~~ 1*f1\n"
    "f2 ~~ 1*f2\n";

CompiledModel two_factor() {
  const std::vector<std::string> names{"y1", "y2", "y3", "y4", "y5", "y6"};
  return compile_model(kTwoFactor, names);
}

int index_of(const MatrixTemplates& t, const std::string& name) {
  for (int k = 0; k < t.free_count(); ++k)
    if (t.params[k].name == name) return k;
  FAIL("no parameter " << name);
  return -1;
}

ImpliedMoments moments_at(const CompiledModel& cm, const Eigen::VectorXd& x) {
  const SemMatrices sm = assemble(cm.templates, std::span<const double>(x.data(), x.size()));
  const auto r = implied_moments(sm, cm.flags);
  REQUIRE(std::holds_alternative<ImpliedMoments>(r));
  return std::get<ImpliedMoments>(r);
}

Eigen::VectorXd valid_two_factor_point(const CompiledModel& cm, std::mt19937_64& rng) {
  const auto& t = cm.templates;
  std::uniform_real_distribution<double> unif(0.3, 1.5);
  Eigen::VectorXd x(t.free_count());
  for (int k = 0; k < t.free_count(); ++k) {
    switch (t.params[k].cls) {
      case ParamClass::PsiCor:
      case ParamClass::ThetaCor: x(k) = unif(rng) - 0.9; break;
      case ParamClass::Nu: x(k) = 2.0 * unif(rng) - 1.0; break;
      default: x(k) = unif(rng);
    }
  }
  return x;
}

double max_rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

// classic split-Rhat written out from its definition
double hand_split_rhat(const Eigen::MatrixXd& x) {
  const int half = static_cast<int>(x.rows()) / 2;
  std::vector<Eigen::VectorXd> parts;
  for (int c = 0; c < x.cols(); ++c) {
    parts.push_back(x.col(c).head(half));
    parts.push_back(x.col(c).tail(half));
  }
  const double n = half, m = static_cast<double>(parts.size());
  double grand = 0.0;
  for (const auto& p : parts) grand += p.mean() / m;
  double b = 0.0, w = 0.0;
  for (const auto& p : parts) {
    b += n / (m - 1.0) * (p.mean() - grand) * (p.mean() - grand);
    w += (p.array() - p.mean()).square().sum() / (n - 1.0) / m;
  }
  return std::sqrt(((n - 1.0) / n * w + b / n) / w);
}

Eigen::MatrixXd white_noise(int n, int chains, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(n, chains);
  for (auto& v : x.reshaped()) v = normal(rng);
  return x;
}

Eigen::MatrixXd ar1(int n, int chains, double phi, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(n, chains);
  for (int c = 0; c < chains; ++c) {
    double v = normal(rng) / std::sqrt(1.0 - phi * phi);
    for (int i = 0; i < n; ++i) {
      v = phi * v + normal(rng);
      x(i, c) = v;
    }
  }
  return x;
}

}  // namespace

TEST_CASE("sign rule picks the first free loading of variance-scaled latents only") {
  const auto cm = two_factor();
  const SignRule rule = build_sign_rule(cm.templates);
  REQUIRE(rule.focal.size() == 2);
  CHECK(rule.focal[0] == index_of(cm.templates, "f1 =~ y1"));
  CHECK(rule.focal[1] == index_of(cm.templates, "f2 =~ y4"));
  auto pair = rule.couplings[index_of(cm.templates, "f1 ~~ f2")];
  std::sort(pair.begin(), pair.end());
  CHECK(pair == std::vector<int>{0, 1});

  const auto hs = testing::load_bundled("holzinger_swineford");
  const SignRule fixed = build_sign_rule(hs.model.templates);
  CHECK(fixed.empty());
}

TEST_CASE("negative focal loading flips the latent and keeps the implied moments") {
  const auto cm = two_factor();
  const auto& t = cm.templates;
  std::mt19937_64 rng(3);
  Eigen::VectorXd x = valid_two_factor_point(cm, rng);
  x(index_of(t, "f1 =~ y1")) = -0.8;
  x(index_of(t, "f1 =~ y2")) = -0.5;
  const ImpliedMoments before = moments_at(cm, x);
  const SignRule rule = build_sign_rule(t);
  Eigen::VectorXd y = x;
  CHECK(sign_correct(rule, y));
  CHECK(y(index_of(t, "f1 =~ y1")) == 0.8);
  CHECK(y(index_of(t, "f1 =~ y2")) == 0.5);
  CHECK(y(index_of(t, "f1 ~~ f2")) == -x(index_of(t, "f1 ~~ f2")));
  const ImpliedMoments after = moments_at(cm, y);
  CHECK(max_rel(after.sigma, before.sigma) < 1e-12);
  CHECK(max_rel(after.mu, before.mu) < 1e-12);
}

TEST_CASE("positive focal loadings leave draws bit-identical") {
  const auto cm = two_factor();
  std::mt19937_64 rng(4);
  const Eigen::VectorXd x = valid_two_factor_point(cm, rng);
  Eigen::VectorXd y = x;
  CHECK_FALSE(sign_correct(build_sign_rule(cm.templates), y));
  CHECK(y == x);
}

TEST_CASE("flipping both factors leaves their correlation unchanged") {
  const auto cm = two_factor();
  const auto& t = cm.templates;
  std::mt19937_64 rng(5);
  Eigen::VectorXd x = valid_two_factor_point(cm, rng);
  for (const char* name : {"f1 =~ y1", "f1 =~ y2", "f1 =~ y3", "f2 =~ y4", "f2 =~ y5", "f2 =~ y6"})
    x(index_of(t, name)) = -x(index_of(t, name));
  const ImpliedMoments before = moments_at(cm, x);
  Eigen::VectorXd y = x;
  sign_correct(build_sign_rule(t), y);
  CHECK(y(index_of(t, "f1 ~~ f2")) == x(index_of(t, "f1 ~~ f2")));
  for (const char* name : {"f1 =~ y1", "f2 =~ y4"}) CHECK(y(index_of(t, name)) > 0.0);
  CHECK(max_rel(moments_at(cm, y).sigma, before.sigma) < 1e-12);
}

TEST_CASE("sign correction is idempotent and moment-preserving on random reflections") {
  const auto cm = two_factor();
  const auto& t = cm.templates;
  const SignRule rule = build_sign_rule(t);
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.5);
  for (int rep = 0; rep < 200; ++rep) {
    Eigen::VectorXd x = valid_two_factor_point(cm, rng);
    // reflect each factor with probability 1/2
    for (int j = 0; j < 2; ++j) {
      if (!coin(rng)) continue;
      for (int k = 0; k < t.free_count(); ++k) {
        int s = 1;
        for (int l : rule.couplings[k]) s *= l == j ? -1 : 1;
        x(k) *= s;
      }
    }
    const ImpliedMoments before = moments_at(cm, x);
    Eigen::VectorXd once = x;
    sign_correct(rule, once);
    Eigen::VectorXd twice = once;
    CHECK_FALSE(sign_correct(rule, twice));
    CHECK(twice == once);
    CHECK(once(rule.focal[0]) >= 0.0);
    CHECK(once(rule.focal[1]) >= 0.0);
    CHECK(max_rel(moments_at(cm, once).sigma, before.sigma) < 1e-12);
  }
}

TEST_CASE("sign_correct on a draws matrix touches only reflected rows") {
  const auto cm = two_factor();
  const auto& t = cm.templates;
  std::mt19937_64 rng(8);
  DrawsMatrix d;
  for (const auto& p : t.params) d.names.push_back(p.name);
  d.chains.push_back(Eigen::MatrixXd(2, t.free_count()));
  d.chains[0].row(0) = valid_two_factor_point(cm, rng).transpose();
  d.chains[0].row(1) = valid_two_factor_point(cm, rng).transpose();
  d.chains[0](1, index_of(t, "f2 =~ y4")) = -1.0;
  const DrawsMatrix out = sign_correct(d, build_sign_rule(t));
  CHECK(out.chains[0].row(0) == d.chains[0].row(0));
  CHECK(out.chains[0](1, index_of(t, "f2 =~ y4")) == 1.0);
}

TEST_CASE("latent conditional for one indicator matches hand conditioning") {
  SemMatrices sm;
  sm.nu = Eigen::VectorXd::Zero(1);
  sm.alpha = Eigen::VectorXd::Zero(1);
  sm.lambda = Eigen::MatrixXd::Ones(1, 1);
  sm.beta = Eigen::MatrixXd::Zero(1, 1);
  sm.theta_sd = Eigen::VectorXd::Ones(1);
  sm.psi_sd = Eigen::VectorXd::Ones(1);
  sm.theta_cor = sm.psi_cor = Eigen::MatrixXd::Identity(1, 1);
  sm.theta = sm.psi = Eigen::MatrixXd::Identity(1, 1);
  StructureFlags flags;
  flags.permutation = {0};
  const auto mom = std::get<ImpliedMoments>(implied_moments(sm, flags));
  const auto c = latent_conditional(mom, sm, {0}, Eigen::VectorXd::Constant(1, 2.0));
  CHECK(c.mean(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(c.cov(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

  // nearly perfect indicator: theta = 1e-6
  sm.theta_sd(0) = 1e-3;
  sm.theta(0, 0) = 1e-6;
  const auto mom2 = std::get<ImpliedMoments>(implied_moments(sm, flags));
  const auto c2 = latent_conditional(mom2, sm, {0}, Eigen::VectorXd::Constant(1, 2.0));
  CHECK(c2.mean(0) == doctest::Approx(2.0).epsilon(1e-5));
  CHECK(std::sqrt(c2.cov(0, 0)) < 1.1e-3);
}

TEST_CASE("latent conditional matches the joint-normal oracle") {
  for (const char* name : {"political_democracy", "holzinger_swineford", "milcs"}) {
    CAPTURE(name);
    const auto b = testing::load_bundled(name);
    const SemDensity d(b.model.templates, b.model.flags, b.data, default_priors(b.model.templates));
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 5; ++rep) {
      const Eigen::VectorXd u = testing::random_valid_point(d, rng);
      const Eigen::VectorXd x = d.constrained(u);
      const SemMatrices sm = assemble(b.model.templates, std::span<const double>(x.data(), x.size()));
      const auto mom = std::get<ImpliedMoments>(implied_moments(sm, b.model.flags));
      const int row = rep * 7 % b.data.n();
      const Eigen::VectorXd y = b.data.values.row(row).transpose();
      std::vector<int> all(b.model.templates.p);
      for (int j = 0; j < b.model.templates.p; ++j) all[j] = j;
      const auto fast = latent_conditional(mom, sm, all, y);
      const auto oracle = verify::condition_joint(sm, y);
      const double scale_m = std::max(1.0, oracle.mean.cwiseAbs().maxCoeff());
      const double scale_c = std::max(1.0, oracle.cov.cwiseAbs().maxCoeff());
      CHECK((fast.mean - oracle.mean).cwiseAbs().maxCoeff() / scale_m < 1e-10);
      CHECK((fast.cov - oracle.cov).cwiseAbs().maxCoeff() / scale_c < 1e-10);
    }
  }
}

TEST_CASE("latent scores reproduce the marginal variance of an indicator") {
  // one factor, three indicators; data simulated at the single parameter draw
  const char* model = "f =~ y1 + y2 + y3\n";
  const std::vector<std::string> names{"y1", "y2", "y3"};
  const auto cm = compile_model(model, names);
  const auto& t = cm.templates;
  Eigen::VectorXd x(t.free_count());
  for (int k = 0; k < t.free_count(); ++k) {
    switch (t.params[k].cls) {
      case ParamClass::Lambda: x(k) = 0.8; break;
      case ParamClass::ThetaSd: x(k) = 0.6; break;
      case ParamClass::PsiSd: x(k) = 1.2; break;
      default: x(k) = 0.5;
    }
  }
  const ImpliedMoments mom = moments_at(cm, x);
  std::mt19937_64 rng(12);
  const int n = 20000;
  Eigen::MatrixXd values(n, 3);
  const Eigen::MatrixXd l = mom.sigma.llt().matrixL();
  std::normal_distribution<double> normal;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(3);
    for (auto& v : z) v = normal(rng);
    values.row(i) = (mom.mu + l * z).transpose();
  }
  const Dataset data = make_dataset(names, values);
  DrawsMatrix draws;
  for (const auto& p : t.params) draws.names.push_back(p.name);
  draws.chains.push_back(x.transpose());
  const auto scores = latent_scores(draws, t, cm.flags, data, rng);
  REQUIRE(scores.size() == 1);
  REQUIRE(scores[0].rows() == n);
  // lambda_1 eta + eps_1 with fresh residuals; y1 loading is fixed to 1
  const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = sm.lambda(0, 0) * scores[0](i, 0) + sm.theta_sd(0) * normal(rng);
  const double var = (v.array() - v.mean()).square().sum() / (n - 1.0);
  CHECK(std::abs(var - mom.sigma(0, 0)) < 4.0 * std::sqrt(2.0 / n) * mom.sigma(0, 0));
}

TEST_CASE("split Rhat on white noise, offset chains and constants") {
  std::mt19937_64 rng(21);
  const Eigen::MatrixXd noise = white_noise(2000, 1, rng);
  Eigen::MatrixXd same(2000, 2);
  same << noise, noise;
  const Diagnostic r = rhat(same);
  CHECK(r.value >= 0.99);
  CHECK(r.value <= 1.01);
  CHECK_FALSE(r.degenerate);

  Eigen::MatrixXd offset = white_noise(1000, 2, rng);
  offset.col(1).array() += 10.0;
  // rank normalization bounds the separated-chain value near 1.83
  CHECK(rhat(offset).value > 1.5);
  CHECK(rhat_basic(offset).value == doctest::Approx(hand_split_rhat(offset)).epsilon(1e-12));
  CHECK(rhat_basic(offset).value > 2.0);

  const Diagnostic c = rhat(Eigen::MatrixXd::Constant(100, 4, 3.0));
  CHECK(c.value == 1.0);
  CHECK(c.degenerate);
  CHECK_THROWS_AS(rhat(Eigen::MatrixXd::Zero(3, 2)), std::invalid_argument);
}

TEST_CASE("ESS of independent, autocorrelated and antithetic chains") {
  std::mt19937_64 rng(22);
  const Eigen::MatrixXd iid = white_noise(1000, 4, rng);
  const double n = 4000.0;
  CHECK(ess_bulk(iid).value > 0.75 * n);
  CHECK(ess_bulk(iid).value < 1.25 * n);

  const Eigen::MatrixXd ar = ar1(5000, 4, 0.9, rng);
  const double expect = 20000.0 * 0.1 / 1.9;
  const double got = ess_bulk(ar).value;
  CHECK(got > expect / 1.5);
  CHECK(got < expect * 1.5);
  CHECK(ess_mean(ar).value > expect / 1.5);
  CHECK(ess_mean(ar).value < expect * 1.5);

  Eigen::MatrixXd alt(1000, 2);
  for (int i = 0; i < 1000; ++i) alt(i, 0) = alt(i, 1) = (i % 2 ? 1.0 : -1.0) + 0.01 * std::sin(i);
  const Diagnostic e = ess_mean(alt);
  CHECK_FALSE(e.degenerate);
  CHECK(e.value > 2000.0);

  CHECK(ess_bulk(Eigen::MatrixXd::Constant(50, 2, 1.0)).degenerate);
}

TEST_CASE("diagnostics reproduce golden reference values") {
  // two AR(0.5) chains of 21 draws; references from an independent
  // NumPy/SciPy transcription of the rank-normalized diagnostics
  const double raw[21][2] = {
      {0.001, 0.165},   {0.299, -0.985},  {-0.124, -0.021}, {-0.953, 0.346}, {-0.931, 0.186},  {-1.457, -2.224},
      {-0.668, -1.451}, {1.006, -0.574},  {0.011, 0.026},   {-0.615, -1.317}, {0.182, -0.936}, {0.448, -1.247},
      {0.329, -1.232},  {-0.766, 0.645},  {-0.412, -0.285}, {0.489, 0.025},  {-1.100, 1.097},  {-1.007, 0.165},
      {-2.405, 0.171},  {-2.492, 0.396},  {-3.088, 0.462}};
  Eigen::MatrixXd x(21, 2);
  for (int i = 0; i < 21; ++i) x.row(i) << raw[i][0], raw[i][1];
  CHECK(rhat_basic(x).value == doctest::Approx(1.0525761493029).epsilon(1e-12));
  CHECK(rhat(x).value == doctest::Approx(1.03867215345716).epsilon(1e-12));
  CHECK(ess_bulk(x).value == doctest::Approx(21.8284623874613).epsilon(1e-12));
  CHECK(ess_mean(x).value == doctest::Approx(18.2473684853091).epsilon(1e-12));
}

TEST_CASE("quantiles interpolate between order statistics") {
  CHECK(quantile({3.0, 1.0, 2.0, 4.0}, 0.5) == 2.5);
  CHECK(quantile({3.0, 1.0, 2.0, 4.0}, 0.0) == 1.0);
  CHECK(quantile({3.0, 1.0, 2.0, 4.0}, 1.0) == 4.0);
  CHECK(quantile({1.0, 2.0, 3.0, 4.0, 5.0}, 0.05) == doctest::Approx(1.2));
  CHECK(quantile({7.0}, 0.95) == 7.0);
}

TEST_CASE("summaries of a known distribution and of a single draw") {
  std::mt19937_64 rng(23);
  DrawsMatrix d;
  d.names = {"a"};
  for (int c = 0; c < 4; ++c) {
    d.chains.push_back(white_noise(1000, 1, rng).array() * 2.0 + 1.0);
    d.divergent.emplace_back(1000, 0);
    d.seconds.push_back(0.5);
  }
  const SummaryTable s = summarize(d);
  REQUIRE(s.rows.size() == 1);
  const auto& r = s.rows[0];
  CHECK(std::abs(r.mean - 1.0) < 3.0 * r.mcse_mean);
  CHECK(r.sd == doctest::Approx(2.0).epsilon(0.05));
  CHECK(r.q5 == doctest::Approx(1.0 - 1.6448536 * 2.0).epsilon(0.05));
  CHECK(r.q95 == doctest::Approx(1.0 + 1.6448536 * 2.0).epsilon(0.05));
  CHECK(r.ess_bulk <= 1.5 * 4000.0);
  CHECK(r.ess_per_second == doctest::Approx(r.ess_bulk / 2.0));
  CHECK(r.rhat < 1.01);
  CHECK(s.find("a") == &s.rows[0]);

  DrawsMatrix one;
  one.names = {"b"};
  one.chains.push_back(Eigen::MatrixXd::Constant(1, 1, 4.25));
  one.divergent.emplace_back(1, 0);
  one.seconds.push_back(0.1);
  const SummaryTable s1 = summarize(one);
  CHECK(s1.rows[0].q5 == 4.25);
  CHECK(s1.rows[0].q50 == 4.25);
  CHECK(s1.rows[0].q95 == 4.25);
  CHECK(s1.rows[0].degenerate);
}
