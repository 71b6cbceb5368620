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

#include "semburn/likelihood.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <cmath>
#include <limits>
#include <memory>

namespace semburn {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kMinRcond = 1e-12;

Eigen::MatrixXd select(const Eigen::MatrixXd& s, const std::vector<int>& idx) {
  const int k = static_cast<int>(idx.size());
  Eigen::MatrixXd out(k, k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) out(a, b) = s(idx[a], idx[b]);
  return out;
}

Eigen::VectorXd select(const Eigen::VectorXd& v, const std::vector<int>& idx) {
  Eigen::VectorXd out(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) out(a) = v(idx[a]);
  return out;
}

bool correlation_pd(const Eigen::MatrixXd& r) {
  if (r.rows() <= 1) return true;
  Eigen::LLT<Eigen::MatrixXd> llt(r);
  return llt.info() == Eigen::Success;
}

bool nonzero_offdiag(const Eigen::MatrixXd& b) {
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      if (i != j && b(i, j) != 0.0) return true;
  return false;
}

// (I - B)^-1 by substitution in the topological order, or by LU.
std::optional<Eigen::MatrixXd> inverse_iminusb(const Eigen::MatrixXd& beta, const StructureFlags& flags,
                                               bool use_structure, double* log_abs_det,
                                               std::vector<std::string>* notes) {
  const int m = static_cast<int>(beta.rows());
  if (use_structure && flags.b_recursive && static_cast<int>(flags.permutation.size()) == m) {
    if (log_abs_det) *log_abs_det = 0.0;
    if (!nonzero_offdiag(beta)) {
      if (notes) notes->push_back("B empty: (I-B)^-1 = I");
      return Eigen::MatrixXd::Identity(m, m);
    }
    Eigen::MatrixXd lower(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        lower(i, j) = (i == j ? 1.0 : 0.0) - beta(flags.permutation[i], flags.permutation[j]);
    const Eigen::MatrixXd inv_p =
        lower.triangularView<Eigen::UnitLower>().solve(Eigen::MatrixXd::Identity(m, m));
    Eigen::MatrixXd inv(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) inv(flags.permutation[i], flags.permutation[j]) = inv_p(i, j);
    if (notes) notes->push_back("recursive B: (I-B)^-1 by triangular substitution, det(I-B) = 1");
    return inv;
  }
  const Eigen::MatrixXd iminusb = Eigen::MatrixXd::Identity(m, m) - beta;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(iminusb);
  const double rc = lu.rcond();
  if (!(rc >= kMinRcond)) return std::nullopt;
  if (log_abs_det) *log_abs_det = std::log(std::abs(lu.determinant()));
  return lu.inverse();
}

struct GroupTerms {
  double logp = 0.0;
  std::string reject;
};

// Sum of group log densities; optionally dlogp/dSigma (symmetric, p x p) and dlogp/dmu.
GroupTerms pattern_loglik(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                          std::span<const PatternGroup> groups, Eigen::MatrixXd* dsigma, Eigen::VectorXd* dmu,
                          std::vector<double>* per_group = nullptr) {
  const int p = static_cast<int>(mu.size());
  GroupTerms out;
  if (dsigma) dsigma->setZero(p, p);
  if (dmu) dmu->setZero(p);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const int k = static_cast<int>(g.observed_idx.size());
    const bool complete = k == p;
    const Eigen::MatrixXd s_o = complete ? sigma : select(sigma, g.observed_idx);
    const Eigen::VectorXd mu_o = complete ? mu : select(mu, g.observed_idx);
    Eigen::LLT<Eigen::MatrixXd> llt(s_o);
    if (llt.info() != Eigen::Success) {
      out.logp = -INFINITY;
      out.reject = "Sigma not positive definite for missing-data pattern " + std::to_string(gi);
      if (per_group) {
        per_group->push_back(-INFINITY);
        continue;
      }
      return out;
    }
    const double n = g.count();
    const Eigen::VectorXd d = g.mean - mu_o;
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::MatrixXd sinv = llt.solve(Eigen::MatrixXd::Identity(k, k));
    const Eigen::VectorXd sinv_d = sinv * d;
    const double quad = (sinv.cwiseProduct(g.crossprod)).sum() + n * d.dot(sinv_d);
    const double lp = -0.5 * (n * k * kLog2Pi + n * logdet + quad);
    out.logp += lp;
    if (per_group) per_group->push_back(lp);

    if (dsigma) {
      const Eigen::MatrixXd s = g.crossprod + n * d * d.transpose();
      const Eigen::MatrixXd gs = 0.5 * (sinv * s * sinv - n * sinv);
      if (complete) {
        *dsigma += gs;
      } else {
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) (*dsigma)(g.observed_idx[a], g.observed_idx[b]) += gs(a, b);
      }
    }
    if (dmu) {
      if (complete) {
        *dmu += n * sinv_d;
      } else {
        for (int a = 0; a < k; ++a) (*dmu)(g.observed_idx[a]) += n * sinv_d(a);
      }
    }
  }
  return out;
}

// Gradient of a symmetric reverse-mode Cholesky: given dF/dL (lower), returns
// dF/dA for A = L L' treating every entry of A as independent.
Eigen::MatrixXd cholesky_backprop(const Eigen::MatrixXd& L, const Eigen::MatrixXd& lbar) {
  const int m = static_cast<int>(L.rows());
  Eigen::MatrixXd c = L.transpose() * lbar.triangularView<Eigen::Lower>().toDenseMatrix();
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) c(i, j) = 0.0;
    c(i, i) *= 0.5;
  }
  // L^-T c L^-1
  const auto tri = L.triangularView<Eigen::Lower>();
  Eigen::MatrixXd x = tri.transpose().solve(c);
  x = tri.transpose().solve(x.transpose()).transpose();
  return x;
}

}  // namespace

MomentsResult implied_moments(const SemMatrices& sm, const StructureFlags& flags, MomentsPath path) {
  const int p = static_cast<int>(sm.lambda.rows());
  const int m = static_cast<int>(sm.lambda.cols());
  const bool simplify = path == MomentsPath::Simplified;
  ImpliedMoments mom;

  if ((!simplify || !flags.theta_diagonal) && !correlation_pd(sm.theta_cor))
    return Rejection{"Theta not positive definite"};
  if ((!simplify || !flags.psi_diagonal) && !correlation_pd(sm.psi_cor))
    return Rejection{"Psi not positive definite"};

  if (m > 0) {
    double log_abs_det = 0.0;
    auto inv = inverse_iminusb(sm.beta, flags, simplify, &log_abs_det, &mom.simplifications);
    if (!inv) return Rejection{"I-B singular"};
    mom.inv_iminusb = std::move(*inv);
    mom.latent_mean = mom.inv_iminusb * sm.alpha;
    const Eigen::MatrixXd lam_a = sm.lambda * mom.inv_iminusb;

    if (simplify && flags.psi_diagonal) {
      const Eigen::VectorXd psi_diag = sm.psi_sd.array().square();
      const Eigen::MatrixXd scaled = lam_a * psi_diag.asDiagonal();
      mom.sigma = scaled * lam_a.transpose();
      mom.sigma += sm.theta;
      mom.latent_cov = mom.inv_iminusb * psi_diag.asDiagonal() * mom.inv_iminusb.transpose();
      // det((I-B)^-1 Psi (I-B')^-1) = prod(psi_ii) / det(I-B)^2
      mom.latent_logdet = psi_diag.array().log().sum() - 2.0 * log_abs_det;
      mom.simplifications.push_back("diagonal Psi: latent determinant as a product of variances");
    } else {
      mom.latent_cov = mom.inv_iminusb * sm.psi * mom.inv_iminusb.transpose();
      mom.sigma = sm.lambda * mom.latent_cov * sm.lambda.transpose() + sm.theta;
      if (simplify && flags.b_recursive) {
        Eigen::LLT<Eigen::MatrixXd> psi_llt(sm.psi);
        mom.latent_logdet = psi_llt.info() == Eigen::Success
                                ? 2.0 * psi_llt.matrixLLT().diagonal().array().log().sum()
                                : -INFINITY;
      } else {
        const double det = mom.latent_cov.partialPivLu().determinant();
        mom.latent_logdet = det > 0.0 ? std::log(det) : -INFINITY;
      }
    }
  } else {
    mom.inv_iminusb.resize(0, 0);
    mom.latent_mean.resize(0);
    mom.latent_cov.resize(0, 0);
    mom.sigma = sm.theta;
  }
  mom.mu = sm.nu;
  if (m > 0) mom.mu.noalias() += sm.lambda * mom.latent_mean;
  mom.sigma = 0.5 * (mom.sigma + mom.sigma.transpose()).eval();

  Eigen::LLT<Eigen::MatrixXd> llt(mom.sigma);
  if (llt.info() != Eigen::Success || p == 0) return Rejection{"Sigma not positive definite"};
  // a pivot lost to rounding: the variable is (numerically) a combination of the others
  const Eigen::VectorXd pivots = llt.matrixLLT().diagonal();
  if ((pivots.array().square() <= kMinPivotRatio * mom.sigma.diagonal().array()).any())
    return Rejection{"Sigma not positive definite"};
  mom.logdet_sigma = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  if (!std::isfinite(mom.logdet_sigma)) return Rejection{"Sigma not positive definite"};
  return mom;
}

LikelihoodValue marginal_loglik(const ImpliedMoments& mom, std::span<const PatternGroup> groups) {
  auto t = pattern_loglik(mom.mu, mom.sigma, groups, nullptr, nullptr);
  if (!t.reject.empty()) return LikelihoodValue::rejection(t.reject);
  LikelihoodValue v;
  v.logp = t.logp;
  return v;
}

std::vector<double> marginal_loglik_by_group(const ImpliedMoments& mom, std::span<const PatternGroup> groups) {
  std::vector<double> out;
  pattern_loglik(mom.mu, mom.sigma, groups, nullptr, nullptr, &out);
  return out;
}

LikelihoodValue marginal_loglik_rowwise(const ImpliedMoments& mom, const Dataset& data) {
  LikelihoodValue v;
  for (int r = 0; r < data.n(); ++r) {
    std::vector<int> idx;
    for (int c = 0; c < data.p(); ++c)
      if (!Dataset::is_missing(data.values(r, c))) idx.push_back(c);
    const Eigen::MatrixXd s = select(mom.sigma, idx);
    Eigen::VectorXd d(idx.size());
    for (std::size_t a = 0; a < idx.size(); ++a) d(a) = data.values(r, idx[a]) - mom.mu(idx[a]);
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) return LikelihoodValue::rejection("Sigma not positive definite for row " + std::to_string(r));
    const Eigen::VectorXd w = llt.matrixL().solve(d);
    v.logp += -0.5 * (idx.size() * kLog2Pi + 2.0 * llt.matrixLLT().diagonal().array().log().sum() + w.squaredNorm());
  }
  return v;
}

LikelihoodValue conditional_loglik(const SemMatrices& sm, const StructureFlags& flags, const Eigen::MatrixXd& eta,
                                   const Dataset& data) {
  const int m = static_cast<int>(sm.lambda.cols());
  LikelihoodValue v;
  const auto groups = group_patterns(data);
  for (const auto& g : groups) {
    const Eigen::MatrixXd th = select(sm.theta, g.observed_idx);
    Eigen::LLT<Eigen::MatrixXd> llt(th);
    if (llt.info() != Eigen::Success) return LikelihoodValue::rejection("Theta not positive definite");
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const int k = static_cast<int>(g.observed_idx.size());
    for (int r = 0; r < g.count(); ++r) {
      const int row = g.row_indices[r];
      Eigen::VectorXd e(k);
      for (int a = 0; a < k; ++a) {
        const int i = g.observed_idx[a];
        e(a) = g.values(r, a) - sm.nu(i) - sm.lambda.row(i).dot(eta.row(row));
      }
      v.logp += -0.5 * (k * kLog2Pi + logdet + llt.matrixL().solve(e).squaredNorm());
    }
  }
  if (m == 0) return v;

  // eta_i ~ N((I-B)^-1 alpha, (I-B)^-1 Psi (I-B')^-1) evaluated through
  // zeta_i = (I-B) eta_i - alpha ~ N(0, Psi) plus log|det(I-B)|.
  double log_abs_det = 0.0;
  if (!flags.b_recursive) {
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(Eigen::MatrixXd::Identity(m, m) - sm.beta);
    if (!(lu.rcond() >= kMinRcond)) return LikelihoodValue::rejection("I-B singular");
    log_abs_det = std::log(std::abs(lu.determinant()));
  }
  const Eigen::MatrixXd iminusb = Eigen::MatrixXd::Identity(m, m) - sm.beta;
  const int n = static_cast<int>(eta.rows());
  if (flags.psi_diagonal) {
    const Eigen::VectorXd var = sm.psi_sd.array().square();
    if ((var.array() <= 0.0).any()) return LikelihoodValue::rejection("Psi not positive definite");
    const double logdet = var.array().log().sum();
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd zeta = iminusb * eta.row(i).transpose() - sm.alpha;
      v.logp += -0.5 * (m * kLog2Pi + logdet + (zeta.array().square() / var.array()).sum()) + log_abs_det;
    }
  } else {
    Eigen::LLT<Eigen::MatrixXd> llt(sm.psi);
    if (llt.info() != Eigen::Success) return LikelihoodValue::rejection("Psi not positive definite");
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd zeta = iminusb * eta.row(i).transpose() - sm.alpha;
      v.logp += -0.5 * (m * kLog2Pi + logdet + llt.matrixL().solve(zeta).squaredNorm()) + log_abs_det;
    }
  }
  return v;
}

Eigen::VectorXd accumulate_free_gradient(const MatrixTemplates& t, const SemMatrices& sm, const MatrixGradients& g) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(t.free_count());
  for (int i = 0; i < t.p; ++i) {
    if (t.nu[i].is_free() && g.nu.size()) out(t.nu[i].index) += g.nu(i);
    for (int j = 0; j < t.m; ++j)
      if (t.lambda(i, j).is_free() && g.lambda.size()) out(t.lambda(i, j).index) += g.lambda(i, j);
  }
  for (int i = 0; i < t.m; ++i) {
    if (t.alpha[i].is_free() && g.alpha.size()) out(t.alpha[i].index) += g.alpha(i);
    for (int j = 0; j < t.m; ++j)
      if (t.beta(i, j).is_free() && g.beta.size()) out(t.beta(i, j).index) += g.beta(i, j);
  }
  auto scale_terms = [&](const std::vector<Slot>& sd_slots, const SlotMatrix& cor_slots, const Eigen::VectorXd& sd,
                         const Eigen::MatrixXd& cor, const Eigen::MatrixXd& gm) {
    if (gm.size() == 0) return;
    const int k = static_cast<int>(sd.size());
    for (int i = 0; i < k; ++i) {
      if (sd_slots[i].is_free()) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += gm(i, j) * cor(i, j) * sd(j);
        out(sd_slots[i].index) += 2.0 * acc;
      }
      for (int j = i + 1; j < k; ++j)
        if (cor_slots(i, j).is_free()) out(cor_slots(i, j).index) += 2.0 * gm(i, j) * sd(i) * sd(j);
    }
  };
  scale_terms(t.theta_sd, t.theta_cor, sm.theta_sd, sm.theta_cor, g.theta);
  scale_terms(t.psi_sd, t.psi_cor, sm.psi_sd, sm.psi_cor, g.psi);
  return out;
}

SemDensity::SemDensity(const MatrixTemplates& templates, StructureFlags flags, const Dataset& data, PriorSet priors,
                       Options opts)
    : templates_(&templates),
      flags_(std::move(flags)),
      priors_(std::move(priors)),
      opts_(opts),
      groups_(group_patterns(data)),
      n_(data.n()) {
  if (priors_.size() != templates.free_count())
    throw std::invalid_argument("prior set does not match the number of free parameters");
  start_center_ = heuristic_start(templates, priors_, data);
}

int SemDensity::dim() const {
  return free_count() + (opts_.mode == DensityMode::Conditional ? n_ * templates_->m : 0);
}

Eigen::VectorXd SemDensity::constrained(const Eigen::VectorXd& u) const {
  return to_constrained(priors_, std::span<const double>(u.data(), free_count()));
}

double SemDensity::log_density(const Eigen::VectorXd& u, Eigen::VectorXd* grad) const {
  auto v = evaluate(u, grad != nullptr);
  if (grad) {
    if (v.rejected() || !std::isfinite(v.logp)) grad->setZero(dim());
    else *grad = std::move(v.gradient);
  }
  return v.rejected() ? -INFINITY : v.logp;
}

LikelihoodValue SemDensity::evaluate(const Eigen::VectorXd& u, bool with_gradient) const {
  if (u.size() != dim()) throw std::invalid_argument("unconstrained vector has the wrong length");
  auto v = opts_.mode == DensityMode::Marginal ? marginal(u, with_gradient) : conditional(u, with_gradient);
  if (v.rejected()) return v;
  if (with_gradient) chain_to_unconstrained(u, v.gradient);
  if (opts_.include_prior) {
    const int k = free_count();
    std::span<double> g = with_gradient ? std::span<double>(v.gradient.data(), k) : std::span<double>{};
    v.logp += log_prior_unconstrained(priors_, std::span<const double>(u.data(), k), g);
  }
  if (!std::isfinite(v.logp)) return LikelihoodValue::rejection("non-finite log density");
  return v;
}

void SemDensity::chain_to_unconstrained(const Eigen::VectorXd& u, Eigen::VectorXd& grad) const {
  for (int k = 0; k < free_count(); ++k) grad(k) *= jacobian(priors_.transforms[k], u(k));
}

LikelihoodValue SemDensity::marginal(const Eigen::VectorXd& u, bool with_gradient) const {
  const auto& t = *templates_;
  const Eigen::VectorXd x = constrained(u);
  const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));
  auto res = implied_moments(sm, flags_, opts_.path);
  if (auto* rej = std::get_if<Rejection>(&res)) return LikelihoodValue::rejection(rej->reason);
  const auto& mom = std::get<ImpliedMoments>(res);

  LikelihoodValue v;
  Eigen::MatrixXd dsigma;
  Eigen::VectorXd dmu;
  auto terms = pattern_loglik(mom.mu, mom.sigma, groups_, with_gradient ? &dsigma : nullptr,
                              with_gradient ? &dmu : nullptr);
  if (!terms.reject.empty()) return LikelihoodValue::rejection(terms.reject);
  v.logp = terms.logp;
  if (!with_gradient) return v;

  MatrixGradients g;
  g.nu = dmu;
  g.theta = dsigma;
  if (t.m > 0) {
    const Eigen::MatrixXd& a = mom.inv_iminusb;
    const Eigen::MatrixXd lam_a = sm.lambda * a;                  // p x m
    const Eigen::MatrixXd g_lam_phi = dsigma * (sm.lambda * mom.latent_cov);  // p x m
    const Eigen::VectorXd mt_gmu = lam_a.transpose() * dmu;        // m
    g.lambda = 2.0 * g_lam_phi + dmu * mom.latent_mean.transpose();
    g.psi = lam_a.transpose() * dsigma * lam_a;
    g.beta = 2.0 * lam_a.transpose() * g_lam_phi + mt_gmu * mom.latent_mean.transpose();
    g.alpha = mt_gmu;
  }
  v.gradient = Eigen::VectorXd::Zero(dim());
  v.gradient.head(t.free_count()) = accumulate_free_gradient(t, sm, g);
  return v;
}

LikelihoodValue SemDensity::conditional(const Eigen::VectorXd& u, bool with_gradient) const {
  const auto& t = *templates_;
  const int k_free = t.free_count();
  const int m = t.m, p = t.p, n = n_;
  const Eigen::VectorXd x = constrained(u);
  const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));

  // latent innovations, one column per case
  const Eigen::Map<const Eigen::MatrixXd> z(u.data() + k_free, m, n);

  Eigen::MatrixXd lr = Eigen::MatrixXd::Identity(m, m);
  if (!flags_.psi_diagonal && m > 1) {
    Eigen::LLT<Eigen::MatrixXd> llt(sm.psi_cor);
    if (llt.info() != Eigen::Success) return LikelihoodValue::rejection("Psi not positive definite");
    lr = llt.matrixL();
  }
  Eigen::MatrixXd a;
  if (m > 0) {
    auto inv = inverse_iminusb(sm.beta, flags_, opts_.path == MomentsPath::Simplified, nullptr, nullptr);
    if (!inv) return LikelihoodValue::rejection("I-B singular");
    a = std::move(*inv);
  }
  const Eigen::MatrixXd c = sm.psi_sd.asDiagonal() * lr;  // lower triangular
  Eigen::MatrixXd h = c * z;
  h.colwise() += sm.alpha;
  const Eigen::MatrixXd eta = m > 0 ? Eigen::MatrixXd(a * h) : Eigen::MatrixXd(0, n);  // m x n

  LikelihoodValue v;
  Eigen::VectorXd g_nu = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd g_lambda = Eigen::MatrixXd::Zero(p, m);
  Eigen::MatrixXd g_theta = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd r_eta = Eigen::MatrixXd::Zero(m, n);

  for (const auto& g : groups_) {
    const int k = static_cast<int>(g.observed_idx.size());
    const Eigen::MatrixXd th = select(sm.theta, g.observed_idx);
    Eigen::LLT<Eigen::MatrixXd> llt(th);
    if (llt.info() != Eigen::Success) return LikelihoodValue::rejection("Theta not positive definite");
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    if (!std::isfinite(logdet)) return LikelihoodValue::rejection("Theta not positive definite");

    Eigen::MatrixXd lam_o(k, m);
    Eigen::VectorXd nu_o(k);
    for (int a_i = 0; a_i < k; ++a_i) {
      lam_o.row(a_i) = sm.lambda.row(g.observed_idx[a_i]);
      nu_o(a_i) = sm.nu(g.observed_idx[a_i]);
    }
    Eigen::MatrixXd eta_g(m, g.count());
    for (int r = 0; r < g.count(); ++r) eta_g.col(r) = eta.col(g.row_indices[r]);
    Eigen::MatrixXd res = g.values.transpose();
    res.colwise() -= nu_o;
    if (m > 0) res.noalias() -= lam_o * eta_g;
    const Eigen::MatrixXd w = llt.solve(res);  // Theta_o^-1 residuals
    v.logp += -0.5 * (g.count() * (k * kLog2Pi + logdet) + res.cwiseProduct(w).sum());

    if (!with_gradient) continue;
    const Eigen::MatrixXd th_inv = llt.solve(Eigen::MatrixXd::Identity(k, k));
    const Eigen::MatrixXd gt = 0.5 * (w * w.transpose() - g.count() * th_inv);
    const Eigen::VectorXd gn = w.rowwise().sum();
    const Eigen::MatrixXd gl = w * eta_g.transpose();
    const Eigen::MatrixXd re = lam_o.transpose() * w;
    for (int a_i = 0; a_i < k; ++a_i) {
      const int i = g.observed_idx[a_i];
      g_nu(i) += gn(a_i);
      g_lambda.row(i) += gl.row(a_i);
      for (int b_i = 0; b_i < k; ++b_i) g_theta(i, g.observed_idx[b_i]) += gt(a_i, b_i);
    }
    for (int r = 0; r < g.count(); ++r) r_eta.col(g.row_indices[r]) += re.col(r);
  }
  v.logp += -0.5 * (z.squaredNorm() + static_cast<double>(n) * m * kLog2Pi);
  if (!with_gradient) return v;

  MatrixGradients mg;
  mg.nu = g_nu;
  mg.lambda = g_lambda;
  mg.theta = g_theta;
  Eigen::MatrixXd g_c;
  if (m > 0) {
    const Eigen::MatrixXd hbar = a.transpose() * r_eta;  // d/d h_i
    mg.alpha = hbar.rowwise().sum();
    mg.beta = hbar * eta.transpose();
    g_c = hbar * z.transpose();
    v.gradient = Eigen::VectorXd::Zero(dim());
    Eigen::Map<Eigen::MatrixXd> gz(v.gradient.data() + k_free, m, n);
    gz = c.transpose() * hbar - z;
  } else {
    v.gradient = Eigen::VectorXd::Zero(dim());
  }
  Eigen::VectorXd gfree = accumulate_free_gradient(t, sm, mg);

  if (m > 0) {
    // C = D_psi L_r
    for (int j = 0; j < m; ++j) {
      if (!t.psi_sd[j].is_free()) continue;
      double acc = 0.0;
      for (int k = 0; k <= j; ++k) acc += g_c(j, k) * lr(j, k);
      gfree(t.psi_sd[j].index) += acc;
    }
    if (!flags_.psi_diagonal && m > 1) {
      Eigen::MatrixXd lbar = sm.psi_sd.asDiagonal() * g_c;
      const Eigen::MatrixXd ga = cholesky_backprop(lr, lbar);
      for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j)
          if (t.psi_cor(i, j).is_free()) gfree(t.psi_cor(i, j).index) += ga(i, j) + ga(j, i);
    }
  }
  v.gradient.head(k_free) = gfree;
  return v;
}

namespace {

struct GslProblem {
  const SemDensity* density;
  Eigen::VectorXd grad;
};

// GSL minimizes, so the callbacks negate the log-likelihood. Rejected points
// get a huge finite value so that the line search backs off.
constexpr double kRejectedObjective = 1e300;

double gsl_f(const gsl_vector* x, void* params) {
  auto* p = static_cast<GslProblem*>(params);
  const Eigen::Map<const Eigen::VectorXd> u(x->data, static_cast<Eigen::Index>(x->size));
  const double f = p->density->log_density(u, nullptr);
  return std::isfinite(f) ? -f : kRejectedObjective;
}

void gsl_fdf(const gsl_vector* x, void* params, double* f, gsl_vector* g) {
  auto* p = static_cast<GslProblem*>(params);
  const Eigen::Map<const Eigen::VectorXd> u(x->data, static_cast<Eigen::Index>(x->size));
  const double lp = p->density->log_density(u, &p->grad);
  *f = std::isfinite(lp) ? -lp : kRejectedObjective;
  for (std::size_t i = 0; i < g->size; ++i) gsl_vector_set(g, i, -p->grad(static_cast<Eigen::Index>(i)));
}

void gsl_df(const gsl_vector* x, void* params, gsl_vector* g) {
  double f = 0.0;
  gsl_fdf(x, params, &f, g);
}

}  // namespace

Eigen::VectorXd heuristic_start(const MatrixTemplates& t, const PriorSet& priors, const Dataset& data) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(t.free_count());
  for (int k = 0; k < t.free_count(); ++k) {
    const auto& fp = t.params[k];
    switch (fp.cls) {
      case ParamClass::Lambda: x(k) = 1.0; break;
      case ParamClass::PsiSd: x(k) = std::sqrt(0.05); break;
      case ParamClass::Nu:
      case ParamClass::ThetaSd: {
        double sum = 0.0, sq = 0.0;
        int n = 0;
        for (int r = 0; r < data.n(); ++r) {
          const double v = data.values(r, fp.row);
          if (Dataset::is_missing(v)) continue;
          sum += v;
          sq += v * v;
          ++n;
        }
        const double mean = n > 0 ? sum / n : 0.0;
        const double var = n > 1 ? (sq - n * mean * mean) / (n - 1) : 1.0;
        x(k) = fp.cls == ParamClass::Nu ? mean : std::sqrt(0.5 * std::max(var, 1e-8));
        break;
      }
      default: break;
    }
  }
  return to_unconstrained(priors, std::span<const double>(x.data(), x.size()));
}

MlResult maximize_marginal_loglik(const SemDensity& density, const Eigen::VectorXd& start, MlOptions opts) {
  if (density.options().mode != DensityMode::Marginal || density.options().include_prior)
    throw std::invalid_argument("maximize_marginal_loglik needs a marginal, prior-free density");
  const int k = density.dim();
  MlResult out;
  if (!std::isfinite(density.log_density(start, nullptr)))
    throw std::invalid_argument("ML start point has zero density");

  gsl_set_error_handler_off();
  GslProblem problem{&density, Eigen::VectorXd(k)};
  gsl_multimin_function_fdf fn{&gsl_f, &gsl_df, &gsl_fdf, static_cast<std::size_t>(k), &problem};
  std::unique_ptr<gsl_vector, decltype(&gsl_vector_free)> x(gsl_vector_alloc(k), &gsl_vector_free);
  for (int i = 0; i < k; ++i) gsl_vector_set(x.get(), i, start(i));
  std::unique_ptr<gsl_multimin_fdfminimizer, decltype(&gsl_multimin_fdfminimizer_free)> solver(
      gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, k), &gsl_multimin_fdfminimizer_free);

  Eigen::VectorXd u = start;
  int stalls = 0;
  gsl_multimin_fdfminimizer_set(solver.get(), &fn, x.get(), 0.1, 0.1);
  for (out.iterations = 0; out.iterations < opts.max_iterations; ++out.iterations) {
    const int status = gsl_multimin_fdfminimizer_iterate(solver.get());
    if (gsl_multimin_test_gradient(solver->gradient, opts.gradient_tolerance) == GSL_SUCCESS) {
      out.converged = true;
      break;
    }
    if (status != GSL_SUCCESS) {
      // no progress along the current direction: restart from here with a
      // fresh curvature estimate, give up after repeated stalls
      if (++stalls > 5) break;
      gsl_vector_memcpy(x.get(), solver->x);
      gsl_multimin_fdfminimizer_set(solver.get(), &fn, x.get(), 0.01, 0.1);
    } else {
      stalls = 0;
    }
  }
  for (int i = 0; i < k; ++i) u(i) = gsl_vector_get(solver->x, i);
  out.logp = density.log_density(u, nullptr);
  if (!out.converged) {
    Eigen::VectorXd g(k);
    density.log_density(u, &g);
    out.converged = g.lpNorm<Eigen::Infinity>() < 1e-4;
  }
  out.unconstrained = u;
  out.estimate = density.constrained(u);

  // numerical Hessian from the analytic gradient
  Eigen::MatrixXd hess(k, k);
  Eigen::VectorXd gp(k), gm(k);
  for (int i = 0; i < k; ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(u(i)));
    Eigen::VectorXd up = u, um = u;
    up(i) += h;
    um(i) -= h;
    density.log_density(up, &gp);
    density.log_density(um, &gm);
    hess.col(i) = (gp - gm) / (2.0 * h);
  }
  hess = 0.5 * (hess + hess.transpose()).eval();
  out.std_error = Eigen::VectorXd::Constant(k, std::numeric_limits<double>::quiet_NaN());
  Eigen::LLT<Eigen::MatrixXd> llt(-hess);
  if (llt.info() == Eigen::Success) {
    const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
    for (int i = 0; i < k; ++i)
      out.std_error(i) = std::abs(jacobian(density.priors().transforms[i], u(i))) * std::sqrt(cov(i, i));
  }
  return out;
}

}  // namespace semburn
