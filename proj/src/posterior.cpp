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


#include "semburn/posterior.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace semburn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Split each chain in half, dropping the middle draw of odd-length chains.
Eigen::MatrixXd split_chains(const Eigen::MatrixXd& x) {
  const int n = static_cast<int>(x.rows()), half = n / 2;
  Eigen::MatrixXd out(half, 2 * x.cols());
  for (int c = 0; c < x.cols(); ++c) {
    out.col(2 * c) = x.col(c).head(half);
    out.col(2 * c + 1) = x.col(c).tail(half);
  }
  return out;
}

bool degenerate_input(const Eigen::MatrixXd& x) {
  if (!x.allFinite() || x.size() == 0) return true;
  return (x.array() == x(0, 0)).all();
}

// Normal scores of the pooled average ranks.
Eigen::MatrixXd rank_normalize(const Eigen::MatrixXd& x) {
  const Eigen::Index s = x.size();
  std::vector<Eigen::Index> order(s);
  std::iota(order.begin(), order.end(), 0);
  const double* v = x.data();
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return v[a] < v[b]; });
  Eigen::MatrixXd z(x.rows(), x.cols());
  const boost::math::normal_distribution<double> std_normal;
  for (Eigen::Index i = 0; i < s;) {
    Eigen::Index j = i;
    while (j + 1 < s && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    const double score = boost::math::quantile(std_normal, (rank - 0.375) / (static_cast<double>(s) + 0.25));
    for (Eigen::Index k = i; k <= j; ++k) z.data()[order[k]] = score;
    i = j + 1;
  }
  return z;
}

double median(const Eigen::MatrixXd& x) { return quantile(std::vector<double>(x.data(), x.data() + x.size()), 0.5); }

Eigen::MatrixXd fold(const Eigen::MatrixXd& x) { return (x.array() - median(x)).abs().matrix(); }

double rhat_of(const Eigen::MatrixXd& x) {
  const double n = static_cast<double>(x.rows());
  const Eigen::RowVectorXd means = x.colwise().mean();
  const Eigen::RowVectorXd vars = (x.rowwise() - means).colwise().squaredNorm() / (n - 1.0);
  const double w = vars.mean();
  const double b = n * (means.array() - means.mean()).square().sum() / static_cast<double>(x.cols() - 1);
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

void require_shape(const Eigen::MatrixXd& x, int min_chains) {
  if (x.cols() < min_chains || x.rows() < 4)
    throw std::invalid_argument("diagnostics need at least " + std::to_string(min_chains) +
                                " chains of at least 4 draws");
}

}  // namespace

bool SignRule::empty() const {
  return std::all_of(focal.begin(), focal.end(), [](int f) { return f < 0; });
}

SignRule build_sign_rule(const MatrixTemplates& t) {
  SignRule rule;
  rule.focal.assign(t.m, -1);
  rule.couplings.assign(t.free_count(), {});
  for (int j = 0; j < t.m; ++j) {
    bool fixed_scale = false;
    int first = -1;
    for (int i = 0; i < t.p; ++i) {
      const Slot& s = t.lambda(i, j);
      if (s.is_free()) {
        if (first < 0) first = s.index;
      } else if (s.value != 0.0) {
        fixed_scale = true;
      }
    }
    if (!fixed_scale) rule.focal[j] = first;
  }
  // a parameter shared by equality constraints takes the couplings of its first slot
  std::vector<bool> seen(t.free_count(), false);
  auto couple = [&](const Slot& s, std::initializer_list<int> latents) {
    if (!s.is_free() || seen[s.index]) return;
    seen[s.index] = true;
    rule.couplings[s.index].assign(latents.begin(), latents.end());
  };
  for (int j = 0; j < t.m; ++j)
    for (int i = 0; i < t.p; ++i) couple(t.lambda(i, j), {j});
  for (int i = 0; i < t.m; ++i)
    for (int j = 0; j < t.m; ++j)
      if (i != j) couple(t.beta(i, j), {i, j});
  for (int i = 0; i < t.m; ++i)
    for (int j = 0; j < i; ++j) couple(t.psi_cor(i, j), {i, j});
  for (int j = 0; j < t.m; ++j) couple(t.alpha[j], {j});
  return rule;
}

bool sign_correct(const SignRule& rule, Eigen::Ref<Eigen::VectorXd> x) {
  std::vector<int> flip(rule.focal.size(), 1);
  bool any = false;
  for (std::size_t j = 0; j < rule.focal.size(); ++j)
    if (rule.focal[j] >= 0 && x(rule.focal[j]) < 0.0) {
      flip[j] = -1;
      any = true;
    }
  if (!any) return false;
  for (std::size_t k = 0; k < rule.couplings.size(); ++k) {
    int s = 1;
    for (int j : rule.couplings[k]) s *= flip[j];
    if (s < 0) x(static_cast<Eigen::Index>(k)) = -x(static_cast<Eigen::Index>(k));
  }
  return true;
}

DrawsMatrix sign_correct(DrawsMatrix draws, const SignRule& rule) {
  if (rule.empty()) return draws;
  const int k = static_cast<int>(rule.couplings.size());
  for (auto& chain : draws.chains)
    for (Eigen::Index r = 0; r < chain.rows(); ++r) {
      Eigen::VectorXd row = chain.row(r).head(k).transpose();
      if (sign_correct(rule, row)) chain.row(r).head(k) = row.transpose();
    }
  return draws;
}

LatentConditional latent_conditional(const ImpliedMoments& mom, const SemMatrices& sm,
                                     const std::vector<int>& observed_idx, const Eigen::VectorXd& y_obs) {
  const int k = static_cast<int>(observed_idx.size());
  const int m = static_cast<int>(mom.latent_mean.size());
  LatentConditional out{mom.latent_mean, mom.latent_cov};
  if (k == 0) return out;
  Eigen::MatrixXd sigma_o(k, k), cross(m, k);  // cross = Cov(eta, y_o)
  Eigen::VectorXd resid(k);
  const Eigen::MatrixXd cov_eta_y = mom.latent_cov * sm.lambda.transpose();
  for (int a = 0; a < k; ++a) {
    resid(a) = y_obs(a) - mom.mu(observed_idx[a]);
    cross.col(a) = cov_eta_y.col(observed_idx[a]);
    for (int b = 0; b < k; ++b) sigma_o(a, b) = mom.sigma(observed_idx[a], observed_idx[b]);
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(sigma_o);
  const Eigen::MatrixXd gain = ldlt.solve(cross.transpose()).transpose();  // m x k
  out.mean += gain * resid;
  out.cov -= gain * cross.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

std::vector<Eigen::MatrixXd> latent_scores(const DrawsMatrix& draws, const MatrixTemplates& t,
                                           const StructureFlags& flags, const Dataset& data, std::mt19937_64& rng,
                                           int stride) {
  if (stride < 1) throw std::invalid_argument("latent score stride must be positive");
  const auto groups = group_patterns(data);
  const int k = t.free_count();
  std::normal_distribution<double> normal;
  std::vector<Eigen::MatrixXd> out;
  for (const auto& chain : draws.chains)
    for (Eigen::Index r = 0; r < chain.rows(); r += stride) {
      const Eigen::VectorXd x = chain.row(r).head(k).transpose();
      const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));
      const auto res = implied_moments(sm, flags);
      if (const auto* rej = std::get_if<Rejection>(&res))
        throw std::logic_error("stored draw does not assemble: " + rej->reason);
      const auto& mom = std::get<ImpliedMoments>(res);
      Eigen::MatrixXd eta(data.n(), t.m);
      for (const auto& g : groups) {
        // the conditional covariance depends only on the pattern
        const LatentConditional base = latent_conditional(mom, sm, g.observed_idx, g.values.row(0).transpose());
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(base.cov);
        const Eigen::MatrixXd root =
            es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
        for (int q = 0; q < g.count(); ++q) {
          const Eigen::VectorXd y = g.values.row(q).transpose();
          const LatentConditional c = q == 0 ? base : latent_conditional(mom, sm, g.observed_idx, y);
          Eigen::VectorXd z(t.m);
          for (int j = 0; j < t.m; ++j) z(j) = normal(rng);
          eta.row(g.row_indices[q]) = (c.mean + root * z).transpose();
        }
      }
      out.push_back(std::move(eta));
    }
  return out;
}

double ess_raw(const Eigen::MatrixXd& x) {
  const int n = static_cast<int>(x.rows()), chains = static_cast<int>(x.cols());
  const Eigen::RowVectorXd means = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - means;
  // biased autocovariance of every chain at lag t, averaged over chains
  auto mean_acov = [&](int lag) {
    double sum = 0.0;
    for (int c = 0; c < chains; ++c)
      sum += centred.col(c).head(n - lag).dot(centred.col(c).tail(n - lag)) / n;
    return sum / chains;
  };
  const double acov0 = mean_acov(0);
  const double mean_var = acov0 * n / (n - 1.0);
  double var_plus = mean_var * (n - 1.0) / n;
  if (chains > 1) var_plus += (means.array() - means.mean()).square().sum() / (chains - 1.0);
  std::vector<double> rho(n + 1, 0.0);
  rho[0] = 1.0;
  double rho_even = 1.0;
  double rho_odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
  rho[1] = rho_odd;
  int t = 1;
  while (t < n - 5 && rho_even + rho_odd > 0.0) {
    rho_even = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
    rho_odd = 1.0 - (mean_var - mean_acov(t + 2)) / var_plus;
    if (rho_even + rho_odd >= 0.0) {
      rho[t + 1] = rho_even;
      rho[t + 2] = rho_odd;
    }
    t += 2;
  }
  const int max_t = t;
  if (rho_even > 0.0) rho[max_t + 1] = rho_even;
  // initial monotone sequence
  for (t = 1; t <= max_t - 2; t += 2)
    if (rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]) {
      rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
      rho[t + 2] = rho[t + 1];
    }
  const double total = static_cast<double>(n) * chains;
  double tau = -1.0 + rho[max_t + 1];
  for (int i = 0; i <= max_t; ++i) tau += 2.0 * rho[i];
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

Diagnostic rhat_basic(const Eigen::MatrixXd& draws) {
  require_shape(draws, 1);
  if (degenerate_input(draws)) return {1.0, true};
  return {rhat_of(split_chains(draws)), false};
}

Diagnostic rhat(const Eigen::MatrixXd& draws) {
  require_shape(draws, 1);
  if (degenerate_input(draws)) return {1.0, true};
  const Eigen::MatrixXd split = split_chains(draws);
  const double bulk = rhat_of(rank_normalize(split));
  const double tail = rhat_of(rank_normalize(fold(split)));
  return {std::max(bulk, tail), false};
}

Diagnostic ess_bulk(const Eigen::MatrixXd& draws) {
  require_shape(draws, 1);
  if (degenerate_input(draws)) return {kNaN, true};
  return {ess_raw(rank_normalize(split_chains(draws))), false};
}

Diagnostic ess_mean(const Eigen::MatrixXd& draws) {
  require_shape(draws, 1);
  if (degenerate_input(draws)) return {kNaN, true};
  return {ess_raw(split_chains(draws)), false};
}

double quantile(std::vector<double> values, double prob) {
  if (values.empty()) return kNaN;
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

const SummaryRow* SummaryTable::find(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return &r;
  return nullptr;
}

double SummaryTable::max_rhat() const {
  double worst = 1.0;
  for (const auto& r : rows)
    if (std::isfinite(r.rhat)) worst = std::max(worst, r.rhat);
  return worst;
}

SummaryTable summarize(const DrawsMatrix& draws) {
  SummaryTable table;
  table.seconds = draws.total_seconds();
  table.divergences = draws.divergences();
  table.draws = draws.num_samples() * draws.num_chains();
  for (int k = 0; k < draws.num_params(); ++k) {
    const Eigen::MatrixXd x = draws.parameter(k);
    SummaryRow row;
    row.name = draws.names[k];
    const std::vector<double> pooled(x.data(), x.data() + x.size());
    row.mean = x.mean();
    row.sd = x.size() > 1 ? std::sqrt((x.array() - row.mean).square().sum() / (x.size() - 1.0)) : 0.0;
    row.q5 = quantile(pooled, 0.05);
    row.q50 = quantile(pooled, 0.5);
    row.q95 = quantile(pooled, 0.95);
    if (x.rows() >= 4) {
      const Diagnostic r = rhat(x);
      const Diagnostic eb = ess_bulk(x);
      const Diagnostic em = ess_mean(x);
      row.rhat = r.value;
      row.ess_bulk = eb.value;
      row.degenerate = r.degenerate;
      row.mcse_mean = em.degenerate ? 0.0 : row.sd / std::sqrt(em.value);
    } else {
      row.rhat = kNaN;
      row.ess_bulk = kNaN;
      row.mcse_mean = kNaN;
      row.degenerate = true;
    }
    row.ess_per_second = table.seconds > 0.0 ? row.ess_bulk / table.seconds : kNaN;
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace semburn
