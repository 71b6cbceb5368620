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

#ifndef SEMBURN_LIKELIHOOD_HPP
#define SEMBURN_LIKELIHOOD_HPP

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "semburn/data.hpp"
#include "semburn/model.hpp"
#include "semburn/priors.hpp"

namespace semburn {

/// A parameter point with zero density (singular I - B, non-PD covariance).
struct Rejection {
  std::string reason;
};

inline constexpr double kMinPivotRatio = 1e-13;

/// Model-implied moments of the observed variables.
struct ImpliedMoments {
  Eigen::VectorXd mu;     // nu + Lambda (I - B)^-1 alpha
  Eigen::MatrixXd sigma;  // Lambda (I - B)^-1 Psi (I - B')^-1 Lambda' + Theta
  double logdet_sigma = 0.0;
  Eigen::MatrixXd inv_iminusb;  // (I - B)^-1
  Eigen::VectorXd latent_mean;  // (I - B)^-1 alpha
  Eigen::MatrixXd latent_cov;   // (I - B)^-1 Psi (I - B')^-1
  double latent_logdet = 0.0;   // -inf when Psi is singular
  std::vector<std::string> simplifications;  // which shortcuts were taken
};

using MomentsResult = std::variant<ImpliedMoments, Rejection>;

enum class MomentsPath {
  Simplified,  // exploit recursive B / diagonal Psi when the flags allow
  General,     // LU inverse and general determinants regardless of structure
};

/// Rejects when I - B is (numerically) singular, when the residual correlation
/// matrices are not positive definite, or when Sigma fails Cholesky or has a
/// pivot below kMinPivotRatio times its diagonal entry.
MomentsResult implied_moments(const SemMatrices& sm, const StructureFlags& flags,
                              MomentsPath path = MomentsPath::Simplified);

struct LikelihoodValue {
  double logp = 0.0;
  std::optional<std::string> reject;
  Eigen::VectorXd gradient;  // empty unless requested and logp finite

  bool rejected() const { return reject.has_value(); }
  static LikelihoodValue rejection(std::string why) {
    LikelihoodValue v;
    v.logp = -INFINITY;
    v.reject = std::move(why);
    return v;
  }
};

/// Full-information log-likelihood from per-pattern sufficient statistics.
LikelihoodValue marginal_loglik(const ImpliedMoments& mom, std::span<const PatternGroup> groups);

/// Per-group contributions (same order as `groups`); rejected groups give -inf.
std::vector<double> marginal_loglik_by_group(const ImpliedMoments& mom, std::span<const PatternGroup> groups);

/// Per-row evaluation of the same quantity, kept as a cross-check path.
LikelihoodValue marginal_loglik_rowwise(const ImpliedMoments& mom, const Dataset& data);

/// Joint log density of the observed data and latent values `eta`
/// (n x m, rows aligned with the dataset).
LikelihoodValue conditional_loglik(const SemMatrices& sm, const StructureFlags& flags, const Eigen::MatrixXd& eta,
                                   const Dataset& data);

// Conventional data-based start on the unconstrained scale: intercepts at the
// observed means, residual variances at half the observed variances, free
// loadings at 1, latent variances at 0.05, everything else at 0.
Eigen::VectorXd heuristic_start(const MatrixTemplates& t, const PriorSet& priors, const Dataset& data);

enum class DensityMode { Marginal, Conditional };

/// Log density over the unconstrained parameter vector, with analytic
/// gradient. In conditional mode the vector is [free parameters, z] where z
/// holds n*m standard-normal latent innovations (row-major by case) and
/// eta_i = (I - B)^-1 (alpha + D_psi chol(R_psi) z_i).
class SemDensity {
 public:
  struct Options {
    DensityMode mode = DensityMode::Marginal;
    bool include_prior = true;
    MomentsPath path = MomentsPath::Simplified;
  };

  SemDensity(const MatrixTemplates& templates, StructureFlags flags, const Dataset& data, PriorSet priors,
             Options opts);
  SemDensity(const MatrixTemplates& templates, StructureFlags flags, const Dataset& data, PriorSet priors)
      : SemDensity(templates, std::move(flags), data, std::move(priors), Options{}) {}

  int dim() const;
  int free_count() const { return templates_->free_count(); }
  const MatrixTemplates& templates() const { return *templates_; }
  const StructureFlags& flags() const { return flags_; }
  const PriorSet& priors() const { return priors_; }
  const Options& options() const { return opts_; }
  const std::vector<PatternGroup>& groups() const { return groups_; }
  int rows() const { return n_; }
  // data-based start for the free parameters (unconstrained scale)
  const Eigen::VectorXd& start_center() const { return start_center_; }

  /// logp and, when `grad` is non-null, its gradient. Rejected points give
  /// -inf with the gradient set to zero.
  double log_density(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const;

  /// Same, reporting the rejection reason.
  LikelihoodValue evaluate(const Eigen::VectorXd& u, bool with_gradient) const;

  /// Constrained free parameters from an unconstrained vector (first
  /// free_count() entries are used).
  Eigen::VectorXd constrained(const Eigen::VectorXd& u) const;

 private:
  LikelihoodValue marginal(const Eigen::VectorXd& u, bool with_gradient) const;
  LikelihoodValue conditional(const Eigen::VectorXd& u, bool with_gradient) const;
  void chain_to_unconstrained(const Eigen::VectorXd& u, Eigen::VectorXd& grad) const;

  const MatrixTemplates* templates_;
  StructureFlags flags_;
  PriorSet priors_;
  Options opts_;
  std::vector<PatternGroup> groups_;
  int n_ = 0;
  Eigen::VectorXd start_center_;
};

/// Gradient of the matrix entries of a log-likelihood, accumulated onto free
/// parameters (constrained scale). Equality-linked slots sum.
struct MatrixGradients {
  Eigen::VectorXd nu, alpha;
  Eigen::MatrixXd lambda, beta;
  Eigen::MatrixXd theta, psi;  // gradient w.r.t. the full symmetric matrices
};
Eigen::VectorXd accumulate_free_gradient(const MatrixTemplates& t, const SemMatrices& sm, const MatrixGradients& g);

struct MlResult {
  Eigen::VectorXd estimate;  // constrained scale
  Eigen::VectorXd unconstrained;
  Eigen::VectorXd std_error;  // constrained scale, delta method; NaN if Hessian not negative definite
  double logp = -INFINITY;
  int iterations = 0;
  bool converged = false;
};

struct MlOptions {
  int max_iterations = 2000;
  double gradient_tolerance = 1e-7;
};

/// Quasi-Newton (BFGS) ascent of the marginal log-likelihood (no prior) from
/// an unconstrained start. Standard errors from the numerical Hessian of the
/// analytic gradient.
MlResult maximize_marginal_loglik(const SemDensity& density, const Eigen::VectorXd& start, MlOptions opts = {});

}  // namespace semburn

#endif  // SEMBURN_LIKELIHOOD_HPP
