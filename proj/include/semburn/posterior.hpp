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


// Sign correction, latent scores, convergence diagnostics and summaries.

#ifndef SEMBURN_POSTERIOR_HPP
#define SEMBURN_POSTERIOR_HPP

#include <Eigen/Dense>
#include <random>
#include <string>
#include <vector>

#include "semburn/data.hpp"
#include "semburn/likelihood.hpp"
#include "semburn/model.hpp"
#include "semburn/sampler.hpp"

namespace semburn {

// For every free parameter, the latents whose reflection changes its sign.
// Parameters touched by two flipped latents keep their sign.
struct SignRule {
  std::vector<int> focal;                    // per latent: free index of the focal loading, or -1
  std::vector<std::vector<int>> couplings;   // per free parameter: coupled latents (with repeats)

  bool empty() const;
};

// Focal loading = first free loading of a latent none of whose loadings is
// fixed to a nonzero value.
SignRule build_sign_rule(const MatrixTemplates& t);

// Flips one constrained parameter vector in place; returns true if it changed.
bool sign_correct(const SignRule& rule, Eigen::Ref<Eigen::VectorXd> x);
DrawsMatrix sign_correct(DrawsMatrix draws, const SignRule& rule);

// Conditional normal of the latents given one row's observed values.
struct LatentConditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
LatentConditional latent_conditional(const ImpliedMoments& mom, const SemMatrices& sm,
                                     const std::vector<int>& observed_idx, const Eigen::VectorXd& y_obs);

// One n x m matrix of latent draws per stored parameter draw (chain-major).
// `stride` keeps every stride-th draw of each chain.
std::vector<Eigen::MatrixXd> latent_scores(const DrawsMatrix& draws, const MatrixTemplates& t,
                                           const StructureFlags& flags, const Dataset& data, std::mt19937_64& rng,
                                           int stride = 1);

// Diagnostics take a samples x chains matrix.
struct Diagnostic {
  double value = 1.0;
  bool degenerate = false;  // constant or non-finite input
};

// Rank-normalized split Rhat: max of the bulk and folded (tail) versions.
Diagnostic rhat(const Eigen::MatrixXd& draws);
// Classic split Rhat without rank normalization.
Diagnostic rhat_basic(const Eigen::MatrixXd& draws);
// ESS of rank-normalized split chains.
Diagnostic ess_bulk(const Eigen::MatrixXd& draws);
// ESS of the raw split chains (for Monte Carlo error of the mean).
Diagnostic ess_mean(const Eigen::MatrixXd& draws);
// Geyer initial-positive-sequence ESS of the given chains, no splitting.
double ess_raw(const Eigen::MatrixXd& draws);

// Sample quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double prob);

struct SummaryRow {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double q5 = 0.0;
  double q50 = 0.0;
  double q95 = 0.0;
  double rhat = 1.0;
  double ess_bulk = 0.0;
  double ess_per_second = 0.0;
  double mcse_mean = 0.0;
  bool degenerate = false;
};

struct SummaryTable {
  std::vector<SummaryRow> rows;
  double seconds = 0.0;  // post-warmup sampling time summed over chains
  int divergences = 0;
  int draws = 0;

  const SummaryRow* find(const std::string& name) const;
  double max_rhat() const;
};

SummaryTable summarize(const DrawsMatrix& draws);

}  // namespace semburn

#endif  // SEMBURN_POSTERIOR_HPP
