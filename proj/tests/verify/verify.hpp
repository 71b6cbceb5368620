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

// Slow reference computations used only by the test suites. Nothing here
// calls into the fast likelihood code; only the matrix containers are shared.

#ifndef SEMBURN_VERIFY_HPP
#define SEMBURN_VERIFY_HPP

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <utility>

#include "semburn/data.hpp"
#include "semburn/model.hpp"

namespace semburn::verify {

struct DenseMoments {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  double logdet_sigma = 0.0;
  Eigen::MatrixXd latent_cov;
  double latent_logdet = 0.0;
};

// Direct moment formula: explicit inverse, general determinants. nullopt on the
// same rejection conditions as the fast path.
std::optional<DenseMoments> dense_moments(const SemMatrices& sm);

// Sum over rows of the normal density of each row's observed coordinates.
double rowwise_fiml(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma, const Dataset& data);

// Golub-Welsch nodes and weights for the weight exp(-x^2).
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int nodes);

// log p(y) for one row of a single-latent model, integrating the conditional
// density over eta by adaptive Gauss-Hermite quadrature. NaN entries of y are
// treated as missing.
double quadrature_marginal(const SemMatrices& sm, const Eigen::VectorXd& y, int nodes = 61);

struct Conditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Latent moments given the observed part of y, from the full (m + p) joint covariance.
Conditional condition_joint(const SemMatrices& sm, const Eigen::VectorXd& y);

// Central differences with step h * max(1, |x_i|).
Eigen::VectorXd finite_difference(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                  double h = 1e-5);

}  // namespace semburn::verify

#endif  // SEMBURN_VERIFY_HPP
