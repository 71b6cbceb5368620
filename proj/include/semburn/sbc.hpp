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


// Prior-predictive simulation and simulation-based calibration.

#ifndef SEMBURN_SBC_HPP
#define SEMBURN_SBC_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "semburn/data.hpp"
#include "semburn/likelihood.hpp"
#include "semburn/model.hpp"
#include "semburn/priors.hpp"
#include "semburn/sampler.hpp"

namespace semburn {

// n rows from N(mu, Sigma).
Dataset simulate_dataset(const ImpliedMoments& mom, const std::vector<std::string>& columns, int n,
                         std::mt19937_64& rng);

struct PriorDataset {
  Eigen::VectorXd theta;  // constrained free parameters
  Dataset data;
  int attempts = 0;  // accepted + redrawn
  int redraws = 0;   // prior draws rejected as non-PD (or singular I - B)
};

inline constexpr int kMaxPriorRedraws = 10000;

// Draws theta from the priors until the implied moments are valid, then data.
// Throws std::runtime_error after kMaxPriorRedraws rejected draws.
PriorDataset generate_prior_dataset(const MatrixTemplates& t, const StructureFlags& flags, const PriorSet& priors,
                                    int n, std::mt19937_64& rng);

// Number of posterior draws below `truth`, ties broken uniformly at random.
int rank_statistic(std::span<const double> posterior, double truth, std::mt19937_64& rng);

struct Uniformity {
  double chi_square = 0.0;
  double p_value = 1.0;
};

// Bin counts of ranks in [0, max_rank]; (max_rank + 1) must be divisible by bins.
std::vector<int> rank_histogram(std::span<const int> ranks, int max_rank, int bins);
// Pearson chi-square against equal bin probabilities, bins - 1 degrees of freedom.
Uniformity uniformity_check(std::span<const int> ranks, int max_rank, int bins);

struct SbcConfig {
  int replications = 100;
  int n_per_dataset = 75;
  int posterior_draws = 99;  // L
  int thinning = 0;          // 0: spread L draws evenly over all retained draws
  int bins = 20;
  std::uint64_t seed = 1;
  int threads = 0;
  SamplerConfig sampler;
  // called after every replication with its index and failure message (empty on success)
  std::function<void(int, const std::string&)> progress;

  void validate() const;
};

// One replication: the true parameters and L posterior draws (L x K).
struct SbcReplication {
  Eigen::VectorXd truth;
  Eigen::MatrixXd posterior;
  int attempts = 0;
  int redraws = 0;
  bool low_ess = false;  // fewer than L effective draws were available
};
using SbcReplicate = std::function<SbcReplication(int rep, std::mt19937_64& rng)>;

struct SbcParameterReport {
  std::string name;
  std::string cls;
  std::vector<int> ranks;  // by replication, -1 for failed replications
  std::vector<int> histogram;
  Uniformity uniformity;
  // share of ranks in the first and last bins relative to the uniform expectation
  double extreme_ratio = 0.0;
};

struct SbcReport {
  SbcConfig config;
  std::vector<SbcParameterReport> parameters;
  int completed = 0;
  int failed = 0;
  std::vector<std::string> failures;
  long attempts = 0;
  long redraws = 0;
  int low_ess = 0;
  double seconds = 0.0;

  std::string to_json() const;
  std::string ranks_csv() const;
};

// Generic harness: runs the replications in a pool, one RNG stream each.
SbcReport run_sbc(const std::vector<std::string>& names, const std::vector<std::string>& classes,
                  const SbcReplicate& replicate, const SbcConfig& cfg);

// SEM calibration: prior draw, simulated data, NUTS fit, sign correction.
SbcReport run_sbc(const MatrixTemplates& t, const StructureFlags& flags, const PriorSet& priors,
                  const SbcConfig& cfg);

// Stream for replication `rep` of run `seed`, disjoint from the chain streams.
std::mt19937_64 replication_rng(std::uint64_t seed, int rep);

}  // namespace semburn

#endif  // SEMBURN_SBC_HPP
