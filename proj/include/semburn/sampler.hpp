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

// Multinomial NUTS with windowed diagonal-metric adaptation.

#ifndef SEMBURN_SAMPLER_HPP
#define SEMBURN_SAMPLER_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "semburn/likelihood.hpp"

namespace semburn {

inline constexpr double kInitJitter = 1.0;

struct SamplerConfig {
  int chains = 4;
  int warmup = 300;
  int samples = 1000;
  std::uint64_t seed = 1;
  DensityMode mode = DensityMode::Marginal;
  int max_treedepth = 10;
  double target_accept = 0.8;
  int threads = 0;  // 0: hardware concurrency, capped by SEMBURN_THREADS

  void validate() const;
};

class InitializationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// log density and (optionally) its gradient; -inf marks a rejected point
using LogDensityFn = std::function<double(const Eigen::VectorXd& u, Eigen::VectorXd* grad)>;
// maps an unconstrained point to the row that is stored for it
using StoreFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& u)>;

struct DrawsMatrix {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains;  // per chain: samples x parameters
  std::vector<std::vector<std::uint8_t>> divergent;
  std::vector<Eigen::VectorXd> lp;
  std::vector<double> seconds;  // post-warmup wall clock per chain
  std::vector<double> warmup_seconds;
  std::vector<double> step_size;
  std::vector<int> max_depth_hits;
  std::vector<double> mean_accept;

  int num_chains() const { return static_cast<int>(chains.size()); }
  int num_samples() const { return chains.empty() ? 0 : static_cast<int>(chains[0].rows()); }
  int num_params() const { return static_cast<int>(names.size()); }
  // samples x chains matrix for one parameter
  Eigen::MatrixXd parameter(int k) const;
  int divergences() const;
  double total_seconds() const;
};

// Independent, reproducible stream for chain `chain` of run `seed`.
std::mt19937_64 chain_rng(std::uint64_t seed, int chain);

// Number of worker threads for `wanted` independent jobs.
int thread_budget(int wanted, int requested = 0);

// Uniform [-2, 2] start with finite density and gradient; up to 100 attempts.
Eigen::VectorXd initialize(const LogDensityFn& f, int dim, std::mt19937_64& rng);
// SEM start: the density's data-based centre jittered by U(-jitter, jitter).
Eigen::VectorXd initialize(const SemDensity& density, std::mt19937_64& rng, double jitter = kInitJitter);

struct ChainResult {
  Eigen::MatrixXd draws;
  std::vector<std::uint8_t> divergent;
  Eigen::VectorXd lp;
  double seconds = 0.0;
  double warmup_seconds = 0.0;
  double step_size = 0.0;
  Eigen::VectorXd inv_metric;
  int max_depth_hits = 0;
  double mean_accept = 0.0;
};

ChainResult run_chain(const LogDensityFn& f, const Eigen::VectorXd& init, const SamplerConfig& cfg,
                      std::mt19937_64& rng, const StoreFn& store = {});

DrawsMatrix run_chains(const LogDensityFn& f, int dim, const SamplerConfig& cfg, std::vector<std::string> names,
                       const StoreFn& store = {});

// Posterior sampling for a SEM density; stores the constrained free parameters.
DrawsMatrix run_chains(const SemDensity& density, const SamplerConfig& cfg);

}  // namespace semburn

#endif  // SEMBURN_SAMPLER_HPP
