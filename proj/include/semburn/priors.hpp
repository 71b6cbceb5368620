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

#ifndef SEMBURN_PRIORS_HPP
#define SEMBURN_PRIORS_HPP

#include <Eigen/Dense>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "semburn/model.hpp"

namespace semburn {

/// Normal(mean, sd), Gamma(shape, rate) or Beta(a, b).
struct PriorSpec {
  enum class Family { Normal, Gamma, Beta };
  Family family = Family::Normal;
  double a = 0.0;
  double b = 1.0;

  static PriorSpec normal(double mean, double sd);
  static PriorSpec gamma(double shape, double rate);
  static PriorSpec beta(double a, double b);

  /// Log density on the family's own support.
  double log_density(double x) const;
  std::string to_string() const;
  bool operator==(const PriorSpec&) const = default;
};

enum class TransformKind { Identity, Log, Atanh };

/// Which quantity a Gamma prior on a theta/psi scale parameter describes.
enum class ScaleParam { Sd, Variance, Precision };

/// Per free parameter: prior and unconstrained transform. Scale parameters are
/// stored as sds; `scale` says whether their Gamma prior applies to the sd,
/// the variance, or the precision. Correlation Beta priors apply to (rho+1)/2.
struct PriorSet {
  std::vector<PriorSpec> specs;
  std::vector<TransformKind> transforms;
  ScaleParam scale = ScaleParam::Sd;

  int size() const { return static_cast<int>(specs.size()); }
};

TransformKind transform_for(ParamClass c);

double to_constrained(TransformKind k, double u);
double to_unconstrained(TransformKind k, double x);
/// log |d constrained / d u|
double log_abs_jacobian(TransformKind k, double u);
/// d constrained / d u
double jacobian(TransformKind k, double u);

/// nu, alpha ~ N(0, 32); lambda, beta ~ N(0, 10); sds ~ Gamma(1, 0.5);
/// correlations ~ Beta(1, 1).
PriorSet default_priors(const MatrixTemplates& t);

/// lambda ~ N(1.25, .25); beta ~ N(1.5, .25); sds ~ Gamma(10, 10);
/// correlations ~ Beta(5, 5); intercepts as default.
PriorSet informative_priors(const MatrixTemplates& t);

/// Applies override rules, one per line: `class[(pattern)] family(h1, h2)`.
/// Classes: nu, alpha, lambda, beta, theta, psi, rho, theta_rho, psi_rho.
/// `pattern` is a glob (`*`, `?`) over canonical parameter names. The family
/// must be the one fixed for the class. Throws ModelError.
void apply_prior_overrides(PriorSet& ps, const MatrixTemplates& t, std::string_view rules);

/// Sum over parameters of log p(g(u)) + log|g'(u)|. When `grad` is non-empty
/// it receives (added, not assigned) the derivative with respect to u.
double log_prior_unconstrained(const PriorSet& ps, std::span<const double> u, std::span<double> grad = {});

/// Contribution of parameter `k` alone (same terms as above).
double log_prior_term(const PriorSet& ps, int k, double u, double* dterm = nullptr);

/// One independent draw from every prior, on the constrained scale.
Eigen::VectorXd sample_prior(const PriorSet& ps, std::mt19937_64& rng);

Eigen::VectorXd to_constrained(const PriorSet& ps, std::span<const double> u);
Eigen::VectorXd to_unconstrained(const PriorSet& ps, std::span<const double> x);

}  // namespace semburn

#endif  // SEMBURN_PRIORS_HPP
