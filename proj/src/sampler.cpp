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

#include "semburn/sampler.hpp"

#include "semburn/posterior.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <thread>

namespace semburn {

namespace {

constexpr double kMaxDeltaH = 1000.0;

double log_sum_exp(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct PhasePoint {
  Eigen::VectorXd q, p, g;
  double lp = -INFINITY;
};

// Stan-style dual averaging of log step size.
class StepSizeAdapter {
 public:
  explicit StepSizeAdapter(double delta) : delta_(delta) {}
  void restart(double eps) {
    mu_ = std::log(10.0 * eps);
    counter_ = 0;
    s_bar_ = 0.0;
    x_bar_ = 0.0;
  }
  double learn(double accept) {
    ++counter_;
    accept = std::min(1.0, accept);
    const double eta = 1.0 / (counter_ + kT0);
    s_bar_ = (1.0 - eta) * s_bar_ + eta * (delta_ - accept);
    const double x = mu_ - s_bar_ * std::sqrt(static_cast<double>(counter_)) / kGamma;
    const double x_eta = std::pow(static_cast<double>(counter_), -kKappa);
    x_bar_ = (1.0 - x_eta) * x_bar_ + x_eta * x;
    return std::exp(x);
  }
  double final_step() const { return std::exp(x_bar_); }

 private:
  static constexpr double kGamma = 0.05, kT0 = 10.0, kKappa = 0.75;
  double delta_;
  double mu_ = 0.0, s_bar_ = 0.0, x_bar_ = 0.0;
  long counter_ = 0;
};

// Windowed variance estimation: fast initial buffer, doubling slow windows,
// fast terminal buffer.
class MetricAdapter {
 public:
  MetricAdapter(int warmup, int dim) : warmup_(warmup), n_(0), mean_(Eigen::VectorXd::Zero(dim)), m2_(mean_) {
    init_buffer_ = static_cast<int>(0.15 * warmup);
    term_buffer_ = static_cast<int>(0.1 * warmup);
    window_size_ = std::min(25, warmup - init_buffer_ - term_buffer_);
    next_window_ = init_buffer_ + window_size_ - 1;
    window_end_ = warmup_ - term_buffer_;
    if (window_size_ <= 0) window_end_ = 0;
  }

  bool in_window(int iter) const { return iter >= init_buffer_ && iter < window_end_; }

  // returns true when a window closed and `inv_metric` was updated
  bool observe(int iter, const Eigen::VectorXd& q, Eigen::VectorXd& inv_metric) {
    if (!in_window(iter)) return false;
    ++n_;
    const Eigen::VectorXd delta = q - mean_;
    mean_ += delta / n_;
    m2_ += delta.cwiseProduct(q - mean_);
    if (iter != next_window_) return false;

    const double n = n_;
    const Eigen::VectorXd var = m2_ / (n - 1.0);
    inv_metric = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
    n_ = 0;
    mean_.setZero();
    m2_.setZero();
    // next window
    window_size_ *= 2;
    next_window_ = iter + window_size_;
    if (next_window_ != window_end_ - 1) {
      const int boundary = next_window_ + 2 * window_size_;
      if (boundary >= window_end_ - 1) next_window_ = window_end_ - 1;
    }
    return true;
  }

 private:
  int warmup_;
  int init_buffer_ = 0, term_buffer_ = 0, window_size_ = 0, next_window_ = 0, window_end_ = 0;
  long n_;
  Eigen::VectorXd mean_, m2_;
};

class Nuts {
 public:
  Nuts(const LogDensityFn& f, int max_depth, std::mt19937_64& rng)
      : f_(f), max_depth_(max_depth), rng_(rng) {}

  Eigen::VectorXd inv_metric;
  double eps = 1.0;

  void evaluate(PhasePoint& z) const {
    z.lp = f_(z.q, &z.g);
    if (!std::isfinite(z.lp)) z.lp = -INFINITY;
  }

  double hamiltonian(const PhasePoint& z) const {
    const double h = -z.lp + 0.5 * z.p.cwiseProduct(inv_metric).dot(z.p);
    return std::isnan(h) ? INFINITY : h;
  }

  void sample_momentum(PhasePoint& z) {
    z.p.resize(z.q.size());
    for (Eigen::Index i = 0; i < z.q.size(); ++i) z.p(i) = normal_(rng_) / std::sqrt(inv_metric(i));
  }

  void leapfrog(PhasePoint& z, double step) const {
    z.p += 0.5 * step * z.g;
    z.q += step * inv_metric.cwiseProduct(z.p);
    evaluate(z);
    if (z.lp == -INFINITY) return;
    z.p += 0.5 * step * z.g;
  }

  // heuristic initial step size: double or halve until the one-step
  // acceptance crosses 0.8
  void init_step_size(const PhasePoint& start) {
    PhasePoint z = start;
    sample_momentum(z);
    double h0 = hamiltonian(z);
    leapfrog(z, eps);
    double delta = h0 - hamiltonian(z);
    const int direction = delta > std::log(0.8) ? 1 : -1;
    for (int it = 0; it < 100; ++it) {
      z = start;
      sample_momentum(z);
      h0 = hamiltonian(z);
      leapfrog(z, eps);
      delta = h0 - hamiltonian(z);
      if (direction == 1 && !(delta > std::log(0.8))) break;
      if (direction == -1 && !(delta < std::log(0.8))) break;
      eps = direction == 1 ? 2.0 * eps : 0.5 * eps;
      if (eps > 1e7) throw std::runtime_error("step size diverged during initialization; posterior may be improper");
      if (eps == 0.0) throw std::runtime_error("step size collapsed to zero during initialization");
    }
  }

  struct Transition {
    double accept = 0.0;
    int depth = 0;
    bool divergent = false;
  };

  Transition transition(PhasePoint& current) {
    divergent_ = false;
    n_leapfrog_ = 0;
    sum_metro_ = 0.0;

    PhasePoint z = current;
    sample_momentum(z);
    const double h0 = hamiltonian(z);

    PhasePoint z_fwd = z, z_bck = z, z_sample = z, z_propose = z;
    Eigen::VectorXd p_sharp_fwd_bck = inv_metric.cwiseProduct(z.p);
    Eigen::VectorXd p_sharp_fwd_fwd = p_sharp_fwd_bck, p_sharp_bck_fwd = p_sharp_fwd_bck,
                    p_sharp_bck_bck = p_sharp_fwd_bck;
    Eigen::VectorXd p_fwd_bck = z.p, p_fwd_fwd = z.p, p_bck_fwd = z.p, p_bck_bck = z.p;
    Eigen::VectorXd rho = z.p;
    double log_sum_weight = 0.0;
    int depth = 0;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto n = z.q.size();

    while (depth < max_depth_) {
      Eigen::VectorXd rho_fwd = Eigen::VectorXd::Zero(n), rho_bck = Eigen::VectorXd::Zero(n);
      bool valid = false;
      double lsw_subtree = -INFINITY;
      if (unif(rng_) > 0.5) {
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        z = z_fwd;
        valid = build_tree(depth, z, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd, h0,
                           1.0, lsw_subtree);
        z_fwd = z;
      } else {
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        z = z_bck;
        valid = build_tree(depth, z, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck, p_bck_fwd, p_bck_bck, h0,
                           -1.0, lsw_subtree);
        z_bck = z;
      }
      if (!valid) break;
      ++depth;

      if (lsw_subtree > log_sum_weight) {
        z_sample = z_propose;
      } else if (unif(rng_) < std::exp(lsw_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

      rho = rho_bck + rho_fwd;
      bool persist = criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      Eigen::VectorXd rho_ext = rho_bck + p_fwd_bck;
      persist = persist && criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_ext);
      rho_ext = rho_fwd + p_bck_fwd;
      persist = persist && criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_ext);
      if (!persist) break;
    }
    current = z_sample;
    Transition t;
    t.accept = n_leapfrog_ > 0 ? sum_metro_ / n_leapfrog_ : 0.0;
    t.depth = depth;
    t.divergent = divergent_;
    return t;
  }

 private:
  static bool criterion(const Eigen::VectorXd& p_sharp_minus, const Eigen::VectorXd& p_sharp_plus,
                        const Eigen::VectorXd& rho) {
    return p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0;
  }

  bool build_tree(int depth, PhasePoint& z, PhasePoint& z_propose, Eigen::VectorXd& p_sharp_beg,
                  Eigen::VectorXd& p_sharp_end, Eigen::VectorXd& rho, Eigen::VectorXd& p_beg, Eigen::VectorXd& p_end,
                  double h0, double sign, double& log_sum_weight) {
    if (depth == 0) {
      leapfrog(z, sign * eps);
      ++n_leapfrog_;
      const double h = z.lp == -INFINITY ? INFINITY : hamiltonian(z);
      if (h - h0 > kMaxDeltaH) divergent_ = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      sum_metro_ += h0 - h > 0.0 ? 1.0 : std::exp(h0 - h);
      z_propose = z;
      p_sharp_beg = inv_metric.cwiseProduct(z.p);
      p_sharp_end = p_sharp_beg;
      rho += z.p;
      p_beg = z.p;
      p_end = p_beg;
      return !divergent_;
    }
    const auto n = z.q.size();
    double lsw_init = -INFINITY;
    Eigen::VectorXd p_init_end(n), p_sharp_init_end(n), rho_init = Eigen::VectorXd::Zero(n);
    if (!build_tree(depth - 1, z, z_propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg, p_init_end, h0, sign,
                    lsw_init))
      return false;

    PhasePoint z_propose_final = z;
    double lsw_final = -INFINITY;
    Eigen::VectorXd p_final_beg(n), p_sharp_final_beg(n), rho_final = Eigen::VectorXd::Zero(n);
    if (!build_tree(depth - 1, z, z_propose_final, p_sharp_final_beg, p_sharp_end, rho_final, p_final_beg, p_end, h0,
                    sign, lsw_final))
      return false;

    const double lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
    if (lsw_final > lsw_subtree) {
      z_propose = z_propose_final;
    } else {
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      if (unif(rng_) < std::exp(lsw_final - lsw_subtree)) z_propose = z_propose_final;
    }

    const Eigen::VectorXd rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = criterion(p_sharp_beg, p_sharp_end, rho_subtree);
    Eigen::VectorXd rho_ext = rho_init + p_final_beg;
    persist = persist && criterion(p_sharp_beg, p_sharp_final_beg, rho_ext);
    rho_ext = rho_final + p_init_end;
    persist = persist && criterion(p_sharp_init_end, p_sharp_end, rho_ext);
    return persist;
  }

  const LogDensityFn& f_;
  int max_depth_;
  std::mt19937_64& rng_;
  std::normal_distribution<double> normal_;
  bool divergent_ = false;
  int n_leapfrog_ = 0;
  double sum_metro_ = 0.0;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void SamplerConfig::validate() const {
  if (chains < 1) throw std::invalid_argument("chains must be at least 1");
  if (warmup < 50) throw std::invalid_argument("warmup must be at least 50");
  if (samples < 1) throw std::invalid_argument("samples must be at least 1");
  if (max_treedepth < 1) throw std::invalid_argument("max_treedepth must be at least 1");
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw std::invalid_argument("target_accept must lie in (0, 1)");
}

Eigen::MatrixXd DrawsMatrix::parameter(int k) const {
  Eigen::MatrixXd out(num_samples(), num_chains());
  for (int c = 0; c < num_chains(); ++c) out.col(c) = chains[c].col(k);
  return out;
}

int DrawsMatrix::divergences() const {
  int n = 0;
  for (const auto& d : divergent)
    for (auto v : d) n += v;
  return n;
}

double DrawsMatrix::total_seconds() const {
  double s = 0.0;
  for (double v : seconds) s += v;
  return s;
}

std::mt19937_64 chain_rng(std::uint64_t seed, int chain) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chain), 0x5eb0u};
  return std::mt19937_64(seq);
}

int thread_budget(int wanted, int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SEMBURN_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::clamp(n, 1, std::max(1, wanted));
}

Eigen::VectorXd initialize(const LogDensityFn& f, int dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  Eigen::VectorXd u(dim), g(dim);
  for (int attempt = 0; attempt < 100; ++attempt) {
    for (auto& v : u) v = unif(rng);
    const double lp = f(u, &g);
    if (std::isfinite(lp) && g.allFinite()) return u;
  }
  throw InitializationError("could not find a start with finite log density after 100 attempts");
}

namespace {

// innovations are jittered on a finer scale than the free parameters
constexpr double kInnovationJitter = 0.1;

// Latent innovations placing every case at its conditional latent mean given
// the data, at the free parameters in `u`; false when those are invalid.
bool innovations_at_conditional_mean(const SemDensity& density, Eigen::VectorXd& u) {
  const auto& t = density.templates();
  const int k = t.free_count(), m = t.m;
  if (m == 0) return true;
  const Eigen::VectorXd x = density.constrained(u.head(k));
  const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));
  const auto res = implied_moments(sm, density.flags());
  if (!std::holds_alternative<ImpliedMoments>(res)) return false;
  const auto& mom = std::get<ImpliedMoments>(res);
  const Eigen::LLT<Eigen::MatrixXd> llt(sm.psi_cor);
  if (llt.info() != Eigen::Success) return false;
  const Eigen::MatrixXd c = sm.psi_sd.asDiagonal() * Eigen::MatrixXd(llt.matrixL());
  const Eigen::MatrixXd iminusb = Eigen::MatrixXd::Identity(m, m) - sm.beta;
  for (const auto& g : density.groups())
    for (int q = 0; q < g.count(); ++q) {
      const Eigen::VectorXd mean =
          latent_conditional(mom, sm, g.observed_idx, g.values.row(q).transpose()).mean;
      const Eigen::VectorXd w = iminusb * mean - sm.alpha;
      // forward substitution; a zero scale leaves its innovation at 0
      Eigen::VectorXd z = Eigen::VectorXd::Zero(m);
      for (int j = 0; j < m; ++j) {
        if (c(j, j) <= 0.0) continue;
        z(j) = (w(j) - c.row(j).head(j).dot(z.head(j))) / c(j, j);
      }
      u.segment(k + static_cast<Eigen::Index>(g.row_indices[q]) * m, m) = z;
    }
  return u.allFinite();
}

}  // namespace

Eigen::VectorXd initialize(const SemDensity& density, std::mt19937_64& rng, double jitter) {
  // free parameters: data-based start plus uniform jitter; latent innovations
  // (conditional mode): conditional means given the data, plus a smaller jitter
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const int k = density.free_count();
  const bool conditional = density.dim() > k;
  Eigen::VectorXd u = Eigen::VectorXd::Zero(density.dim()), g(density.dim());
  for (int attempt = 0; attempt < 100; ++attempt) {
    for (int i = 0; i < k; ++i) u(i) = density.start_center()(i) + jitter * unif(rng);
    if (conditional) {
      if (!innovations_at_conditional_mean(density, u)) continue;
      for (Eigen::Index i = k; i < u.size(); ++i) u(i) += kInnovationJitter * jitter * unif(rng);
    }
    const double lp = density.log_density(u, &g);
    if (std::isfinite(lp) && g.allFinite()) return u;
  }
  throw InitializationError("could not find a start with finite log density after 100 attempts");
}

ChainResult run_chain(const LogDensityFn& f, const Eigen::VectorXd& init, const SamplerConfig& cfg,
                      std::mt19937_64& rng, const StoreFn& store) {
  cfg.validate();
  const int dim = static_cast<int>(init.size());
  Nuts nuts(f, cfg.max_treedepth, rng);
  nuts.inv_metric = Eigen::VectorXd::Ones(dim);

  PhasePoint z;
  z.q = init;
  nuts.evaluate(z);
  if (z.lp == -INFINITY) throw InitializationError("initial point has zero density");

  ChainResult out;
  const auto t_warm = std::chrono::steady_clock::now();
  nuts.init_step_size(z);
  StepSizeAdapter step(cfg.target_accept);
  step.restart(nuts.eps);
  MetricAdapter metric(cfg.warmup, dim);
  for (int it = 0; it < cfg.warmup; ++it) {
    const auto t = nuts.transition(z);
    nuts.eps = step.learn(t.accept);
    if (metric.observe(it, z.q, nuts.inv_metric)) {
      nuts.init_step_size(z);
      step.restart(nuts.eps);
    }
  }
  nuts.eps = step.final_step();
  out.warmup_seconds = seconds_since(t_warm);

  const int keep_dim = store ? static_cast<int>(store(z.q).size()) : dim;
  out.draws.resize(cfg.samples, keep_dim);
  out.lp.resize(cfg.samples);
  out.divergent.assign(cfg.samples, 0);
  double accept_sum = 0.0;
  const auto t_samp = std::chrono::steady_clock::now();
  for (int it = 0; it < cfg.samples; ++it) {
    const auto t = nuts.transition(z);
    out.divergent[it] = t.divergent;
    out.max_depth_hits += t.depth >= cfg.max_treedepth;
    accept_sum += t.accept;
    out.lp(it) = z.lp;
    if (store) out.draws.row(it) = store(z.q).transpose();
    else out.draws.row(it) = z.q.transpose();
  }
  out.seconds = std::max(seconds_since(t_samp), 1e-9);
  out.step_size = nuts.eps;
  out.inv_metric = nuts.inv_metric;
  out.mean_accept = accept_sum / cfg.samples;
  return out;
}

namespace {

using InitFn = std::function<Eigen::VectorXd(std::mt19937_64&)>;

DrawsMatrix run_chains_impl(const LogDensityFn& f, int dim, const SamplerConfig& cfg, std::vector<std::string> names,
                            const StoreFn& store, const InitFn& init_fn) {
  cfg.validate();
  if (dim < 1) throw std::invalid_argument("nothing to sample: no free parameters");
  std::vector<ChainResult> results(cfg.chains);
  std::vector<std::exception_ptr> errors(cfg.chains);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int c = next++; c < cfg.chains; c = next++) {
      try {
        auto rng = chain_rng(cfg.seed, c);
        const Eigen::VectorXd init = init_fn(rng);
        results[c] = run_chain(f, init, cfg, rng, store);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const int nthreads = thread_budget(cfg.chains, cfg.threads);
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  DrawsMatrix d;
  d.names = std::move(names);
  for (auto& r : results) {
    d.chains.push_back(std::move(r.draws));
    d.divergent.push_back(std::move(r.divergent));
    d.lp.push_back(std::move(r.lp));
    d.seconds.push_back(r.seconds);
    d.warmup_seconds.push_back(r.warmup_seconds);
    d.step_size.push_back(r.step_size);
    d.max_depth_hits.push_back(r.max_depth_hits);
    d.mean_accept.push_back(r.mean_accept);
  }
  if (d.names.empty())
    for (int k = 0; k < static_cast<int>(d.chains[0].cols()); ++k) d.names.push_back("p" + std::to_string(k + 1));
  return d;
}

}  // namespace

DrawsMatrix run_chains(const LogDensityFn& f, int dim, const SamplerConfig& cfg, std::vector<std::string> names,
                       const StoreFn& store) {
  return run_chains_impl(f, dim, cfg, std::move(names), store,
                         [&](std::mt19937_64& rng) { return initialize(f, dim, rng); });
}

DrawsMatrix run_chains(const SemDensity& density, const SamplerConfig& cfg) {
  if (density.options().mode != cfg.mode) throw std::invalid_argument("sampler mode does not match the density");
  std::vector<std::string> names;
  for (const auto& p : density.templates().params) names.push_back(p.name);
  const int k = density.free_count();
  return run_chains_impl([&](const Eigen::VectorXd& u, Eigen::VectorXd* g) { return density.log_density(u, g); },
                         density.dim(), cfg, std::move(names),
                         [&, k](const Eigen::VectorXd& u) { return density.constrained(u.head(k)); },
                         [&](std::mt19937_64& rng) { return initialize(density, rng); });
}

}  // namespace semburn
