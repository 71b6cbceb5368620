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


#include "semburn/sbc.hpp"

#include <algorithm>
#include <atomic>
#include <boost/math/special_functions/gamma.hpp>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "semburn/posterior.hpp"

namespace semburn {

Dataset simulate_dataset(const ImpliedMoments& mom, const std::vector<std::string>& columns, int n,
                         std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("simulated datasets need at least one row");
  const Eigen::LLT<Eigen::MatrixXd> llt(mom.sigma);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("implied covariance is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  std::normal_distribution<double> normal;
  const int p = static_cast<int>(mom.mu.size());
  Eigen::MatrixXd values(n, p);
  Eigen::VectorXd z(p);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) z(j) = normal(rng);
    values.row(i) = (mom.mu + l * z).transpose();
  }
  return make_dataset(columns, std::move(values));
}

PriorDataset generate_prior_dataset(const MatrixTemplates& t, const StructureFlags& flags, const PriorSet& priors,
                                    int n, std::mt19937_64& rng) {
  PriorDataset out;
  while (out.redraws <= kMaxPriorRedraws) {
    ++out.attempts;
    Eigen::VectorXd theta = sample_prior(priors, rng);
    const SemMatrices sm = assemble(t, std::span<const double>(theta.data(), theta.size()));
    const auto res = implied_moments(sm, flags);
    if (const auto* mom = std::get_if<ImpliedMoments>(&res)) {
      out.theta = std::move(theta);
      out.data = simulate_dataset(*mom, t.observed, n, rng);
      return out;
    }
    ++out.redraws;
  }
  throw std::runtime_error("no valid prior draw after " + std::to_string(kMaxPriorRedraws) + " redraws");
}

int rank_statistic(std::span<const double> posterior, double truth, std::mt19937_64& rng) {
  int below = 0, ties = 0;
  for (double v : posterior) {
    below += v < truth;
    ties += v == truth;
  }
  if (ties == 0) return below;
  return below + std::uniform_int_distribution<int>(0, ties)(rng);
}

std::vector<int> rank_histogram(std::span<const int> ranks, int max_rank, int bins) {
  if (bins < 1 || (max_rank + 1) % bins != 0)
    throw std::invalid_argument("number of possible ranks must be divisible by the number of bins");
  const int width = (max_rank + 1) / bins;
  std::vector<int> counts(bins, 0);
  for (int r : ranks) {
    if (r < 0 || r > max_rank) throw std::invalid_argument("rank out of range");
    ++counts[r / width];
  }
  return counts;
}

Uniformity uniformity_check(std::span<const int> ranks, int max_rank, int bins) {
  const auto counts = rank_histogram(ranks, max_rank, bins);
  if (ranks.empty()) return {};
  const double expected = static_cast<double>(ranks.size()) / bins;
  Uniformity u;
  for (int c : counts) u.chi_square += (c - expected) * (c - expected) / expected;
  u.p_value = bins > 1 ? boost::math::gamma_q(0.5 * (bins - 1), 0.5 * u.chi_square) : 1.0;
  return u;
}

void SbcConfig::validate() const {
  if (replications < 1) throw std::invalid_argument("replications must be positive");
  if (n_per_dataset < 1) throw std::invalid_argument("dataset size must be positive");
  if (posterior_draws < 1) throw std::invalid_argument("posterior draw count must be positive");
  if (bins < 1 || (posterior_draws + 1) % bins != 0)
    throw std::invalid_argument("posterior draws + 1 must be divisible by the number of bins");
  if (thinning < 0) throw std::invalid_argument("thinning must be non-negative");
  if (thinning > 0 && static_cast<long>(thinning) * posterior_draws >
                          static_cast<long>(sampler.chains) * sampler.samples)
    throw std::invalid_argument("thinning leaves fewer than the requested posterior draws");
  sampler.validate();
}

std::mt19937_64 replication_rng(std::uint64_t seed, int rep) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(rep), 0x5bcu};
  return std::mt19937_64(seq);
}

SbcReport run_sbc(const std::vector<std::string>& names, const std::vector<std::string>& classes,
                  const SbcReplicate& replicate, const SbcConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const int reps = cfg.replications, k = static_cast<int>(names.size());
  std::vector<std::vector<int>> ranks(reps, std::vector<int>(k, -1));
  std::vector<std::string> errors(reps);
  std::vector<int> attempts(reps, 0), redraws(reps, 0), low_ess(reps, 0);
  std::atomic<int> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (int r = next++; r < reps; r = next++) {
      auto rng = replication_rng(cfg.seed, r);
      try {
        const SbcReplication rep = replicate(r, rng);
        attempts[r] = rep.attempts;
        redraws[r] = rep.redraws;
        low_ess[r] = rep.low_ess;
        if (rep.truth.size() != k || rep.posterior.cols() != k || rep.posterior.rows() != cfg.posterior_draws)
          throw std::logic_error("replication returned draws of the wrong shape");
        for (int j = 0; j < k; ++j) {
          const Eigen::VectorXd col = rep.posterior.col(j);
          ranks[r][j] = rank_statistic(std::span<const double>(col.data(), col.size()), rep.truth(j), rng);
        }
      } catch (const std::exception& e) {
        std::fill(ranks[r].begin(), ranks[r].end(), -1);
        errors[r] = e.what();
        if (errors[r].empty()) errors[r] = "unknown failure";
      }
      if (cfg.progress) {
        const std::lock_guard<std::mutex> lock(progress_mutex);
        cfg.progress(r, errors[r]);
      }
    }
  };
  const int nthreads = thread_budget(reps, cfg.threads);
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  SbcReport report;
  report.config = cfg;
  for (int r = 0; r < reps; ++r) {
    report.attempts += attempts[r];
    report.redraws += redraws[r];
    report.low_ess += low_ess[r];
    if (errors[r].empty()) {
      ++report.completed;
    } else {
      ++report.failed;
      report.failures.push_back("replication " + std::to_string(r) + ": " + errors[r]);
    }
  }
  for (int j = 0; j < k; ++j) {
    SbcParameterReport pr;
    pr.name = names[j];
    pr.cls = j < static_cast<int>(classes.size()) ? classes[j] : "";
    std::vector<int> valid;
    for (int r = 0; r < reps; ++r) {
      pr.ranks.push_back(ranks[r][j]);
      if (ranks[r][j] >= 0) valid.push_back(ranks[r][j]);
    }
    pr.histogram = rank_histogram(valid, cfg.posterior_draws, cfg.bins);
    pr.uniformity = uniformity_check(valid, cfg.posterior_draws, cfg.bins);
    if (!valid.empty()) {
      const double expected = 2.0 * static_cast<double>(valid.size()) / cfg.bins;
      pr.extreme_ratio = (pr.histogram.front() + (cfg.bins > 1 ? pr.histogram.back() : 0)) / expected;
    }
    report.parameters.push_back(std::move(pr));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

SbcReport run_sbc(const MatrixTemplates& t, const StructureFlags& flags, const PriorSet& priors,
                  const SbcConfig& cfg) {
  cfg.validate();
  std::vector<std::string> names, classes;
  for (const auto& p : t.params) {
    names.push_back(p.name);
    classes.push_back(std::string(class_name(p.cls)));
  }
  const SignRule rule = build_sign_rule(t);
  const int nthreads = thread_budget(cfg.replications, cfg.threads);
  auto replicate = [&](int, std::mt19937_64& rng) {
    PriorDataset pd = generate_prior_dataset(t, flags, priors, cfg.n_per_dataset, rng);
    SbcReplication rep;
    rep.attempts = pd.attempts;
    rep.redraws = pd.redraws;
    rep.truth = pd.theta;
    sign_correct(rule, rep.truth);

    SamplerConfig sc = cfg.sampler;
    sc.seed = rng();
    // replications already run in parallel
    if (nthreads > 1) sc.threads = 1;
    SemDensity density(t, flags, pd.data, priors, SemDensity::Options{.mode = sc.mode});
    const DrawsMatrix draws = sign_correct(run_chains(density, sc), rule);

    const int total = draws.num_chains() * draws.num_samples(), l = cfg.posterior_draws;
    const int k = t.free_count();
    Eigen::MatrixXd pooled(total, k);
    for (int c = 0; c < draws.num_chains(); ++c)
      pooled.middleRows(static_cast<Eigen::Index>(c) * draws.num_samples(), draws.num_samples()) = draws.chains[c];
    rep.posterior.resize(l, k);
    for (int i = 0; i < l; ++i) {
      const long idx = cfg.thinning > 0 ? static_cast<long>(i) * cfg.thinning
                                        : static_cast<long>(i) * total / l;
      rep.posterior.row(i) = pooled.row(idx);
    }
    const double spacing = cfg.thinning > 0 ? cfg.thinning : static_cast<double>(total) / l;
    for (int j = 0; j < k && !rep.low_ess; ++j) {
      const Diagnostic e = ess_bulk(draws.parameter(j));
      if (!e.degenerate && e.value * spacing < total) rep.low_ess = true;
    }
    return rep;
  };
  return run_sbc(names, classes, replicate, cfg);
}

std::string SbcReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["replications"] = config.replications;
  j["n_per_dataset"] = config.n_per_dataset;
  j["posterior_draws"] = config.posterior_draws;
  j["thinning"] = config.thinning;
  j["bins"] = config.bins;
  j["seed"] = config.seed;
  j["completed"] = completed;
  j["failed"] = failed;
  j["failures"] = failures;
  j["prior_attempts"] = attempts;
  j["prior_redraws"] = redraws;
  j["low_ess_replications"] = low_ess;
  j["seconds"] = seconds;
  ordered_json params = ordered_json::array();
  for (const auto& p : parameters) {
    ordered_json e;
    e["name"] = p.name;
    e["class"] = p.cls;
    e["chi_square"] = p.uniformity.chi_square;
    e["p_value"] = p.uniformity.p_value;
    e["extreme_ratio"] = p.extreme_ratio;
    e["histogram"] = p.histogram;
    e["ranks"] = p.ranks;
    params.push_back(std::move(e));
  }
  j["parameters"] = std::move(params);
  return j.dump(2);
}

std::string SbcReport::ranks_csv() const {
  std::ostringstream os;
  os << "replication,param,rank\n";
  for (int r = 0; r < config.replications; ++r)
    for (const auto& p : parameters) {
      if (p.ranks[r] < 0) continue;
      os << r << ",\"" << p.name << "\"," << p.ranks[r] << "\n";
    }
  return os.str();
}

}  // namespace semburn
