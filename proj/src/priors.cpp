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

#include "semburn/priors.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "semburn/errors.hpp"

namespace semburn {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

PriorSpec checked(PriorSpec s) {
  const bool ok = s.family == PriorSpec::Family::Normal ? s.b > 0.0 : (s.a > 0.0 && s.b > 0.0);
  if (!ok || !std::isfinite(s.a) || !std::isfinite(s.b))
    throw ModelError("invalid prior hyperparameters: " + s.to_string());
  return s;
}

PriorSpec::Family family_for(ParamClass c) {
  switch (c) {
    case ParamClass::ThetaSd:
    case ParamClass::PsiSd: return PriorSpec::Family::Gamma;
    case ParamClass::ThetaCor:
    case ParamClass::PsiCor: return PriorSpec::Family::Beta;
    default: return PriorSpec::Family::Normal;
  }
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool glob_match(std::string_view pat, std::string_view s) {
  std::size_t p = 0, i = 0, star = std::string_view::npos, mark = 0;
  while (i < s.size()) {
    if (p < pat.size() && (pat[p] == '?' || pat[p] == s[i])) {
      ++p;
      ++i;
    } else if (p < pat.size() && pat[p] == '*') {
      star = p++;
      mark = i;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      i = ++mark;
    } else {
      return false;
    }
  }
  while (p < pat.size() && pat[p] == '*') ++p;
  return p == pat.size();
}

std::string collapse_spaces(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : trim(s)) {
    if (c == ' ' || c == '\t') {
      space = true;
      continue;
    }
    if (space && !out.empty()) out.push_back(' ');
    space = false;
    out.push_back(c);
  }
  return out;
}

}  // namespace

PriorSpec PriorSpec::normal(double mean, double sd) { return checked({Family::Normal, mean, sd}); }
PriorSpec PriorSpec::gamma(double shape, double rate) { return checked({Family::Gamma, shape, rate}); }
PriorSpec PriorSpec::beta(double a, double b) { return checked({Family::Beta, a, b}); }

double PriorSpec::log_density(double x) const {
  switch (family) {
    case Family::Normal: {
      const double z = (x - a) / b;
      return -0.5 * kLog2Pi - std::log(b) - 0.5 * z * z;
    }
    case Family::Gamma:
      if (x < 0.0) return -INFINITY;
      if (x == 0.0) return a == 1.0 ? std::log(b) : (a < 1.0 ? INFINITY : -INFINITY);
      return a * std::log(b) - std::lgamma(a) + (a - 1.0) * std::log(x) - b * x;
    case Family::Beta:
      if (x < 0.0 || x > 1.0) return -INFINITY;
      return std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + (a - 1.0) * std::log(x) +
             (b - 1.0) * std::log1p(-x);
  }
  return -INFINITY;
}

std::string PriorSpec::to_string() const {
  const char* name = family == Family::Normal ? "normal" : family == Family::Gamma ? "gamma" : "beta";
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s(%.10g, %.10g)", name, a, b);
  return buf;
}

TransformKind transform_for(ParamClass c) {
  switch (c) {
    case ParamClass::ThetaSd:
    case ParamClass::PsiSd: return TransformKind::Log;
    case ParamClass::ThetaCor:
    case ParamClass::PsiCor: return TransformKind::Atanh;
    default: return TransformKind::Identity;
  }
}

double to_constrained(TransformKind k, double u) {
  switch (k) {
    case TransformKind::Identity: return u;
    case TransformKind::Log: return std::exp(u);
    case TransformKind::Atanh: return std::tanh(u);
  }
  return u;
}

double to_unconstrained(TransformKind k, double x) {
  switch (k) {
    case TransformKind::Identity: return x;
    case TransformKind::Log: return std::log(x);
    case TransformKind::Atanh: return std::atanh(x);
  }
  return x;
}

double log_abs_jacobian(TransformKind k, double u) {
  switch (k) {
    case TransformKind::Identity: return 0.0;
    case TransformKind::Log: return u;
    case TransformKind::Atanh: return 2.0 * std::numbers::ln2 - softplus(-2.0 * u) - softplus(2.0 * u);
  }
  return 0.0;
}

double jacobian(TransformKind k, double u) {
  switch (k) {
    case TransformKind::Identity: return 1.0;
    case TransformKind::Log: return std::exp(u);
    case TransformKind::Atanh: {
      const double t = std::tanh(u);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

PriorSet default_priors(const MatrixTemplates& t) {
  PriorSet ps;
  for (const auto& fp : t.params) {
    ps.transforms.push_back(transform_for(fp.cls));
    switch (fp.cls) {
      case ParamClass::Nu:
      case ParamClass::Alpha: ps.specs.push_back(PriorSpec::normal(0.0, 32.0)); break;
      case ParamClass::Lambda:
      case ParamClass::Beta: ps.specs.push_back(PriorSpec::normal(0.0, 10.0)); break;
      case ParamClass::ThetaSd:
      case ParamClass::PsiSd: ps.specs.push_back(PriorSpec::gamma(1.0, 0.5)); break;
      case ParamClass::ThetaCor:
      case ParamClass::PsiCor: ps.specs.push_back(PriorSpec::beta(1.0, 1.0)); break;
    }
  }
  return ps;
}

PriorSet informative_priors(const MatrixTemplates& t) {
  PriorSet ps = default_priors(t);
  for (int k = 0; k < t.free_count(); ++k) {
    switch (t.params[k].cls) {
      case ParamClass::Lambda: ps.specs[k] = PriorSpec::normal(1.25, 0.25); break;
      case ParamClass::Beta: ps.specs[k] = PriorSpec::normal(1.5, 0.25); break;
      case ParamClass::ThetaSd:
      case ParamClass::PsiSd: ps.specs[k] = PriorSpec::gamma(10.0, 10.0); break;
      case ParamClass::ThetaCor:
      case ParamClass::PsiCor: ps.specs[k] = PriorSpec::beta(5.0, 5.0); break;
      default: break;
    }
  }
  return ps;
}

void apply_prior_overrides(PriorSet& ps, const MatrixTemplates& t, std::string_view rules) {
  std::istringstream in{std::string(rules)};
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    auto line = std::string_view(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw ModelError("prior rules line " + std::to_string(lineno) + ": " + why);
    };

    std::size_t i = 0;
    while (i < line.size() && (std::isalnum(static_cast<unsigned char>(line[i])) || line[i] == '_')) ++i;
    const std::string cls(line.substr(0, i));
    std::string pattern = "*";
    auto rest = trim(line.substr(i));
    if (!rest.empty() && rest.front() == '(') {
      const auto close = rest.find(')');
      if (close == std::string_view::npos) fail("unterminated pattern");
      pattern = collapse_spaces(rest.substr(1, close - 1));
      rest = trim(rest.substr(close + 1));
    }

    std::vector<ParamClass> classes;
    if (cls == "nu") classes = {ParamClass::Nu};
    else if (cls == "alpha") classes = {ParamClass::Alpha};
    else if (cls == "lambda") classes = {ParamClass::Lambda};
    else if (cls == "beta") classes = {ParamClass::Beta};
    else if (cls == "theta" || cls == "theta_sd") classes = {ParamClass::ThetaSd};
    else if (cls == "psi" || cls == "psi_sd") classes = {ParamClass::PsiSd};
    else if (cls == "rho") classes = {ParamClass::ThetaCor, ParamClass::PsiCor};
    else if (cls == "theta_rho" || cls == "theta_cor") classes = {ParamClass::ThetaCor};
    else if (cls == "psi_rho" || cls == "psi_cor") classes = {ParamClass::PsiCor};
    else fail("unknown parameter class '" + cls + "'");

    const auto open = rest.find('(');
    const auto close = rest.rfind(')');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open)
      fail("expected family(h1, h2)");
    const std::string family(trim(rest.substr(0, open)));
    const std::string args(rest.substr(open + 1, close - open - 1));
    double h1 = 0.0, h2 = 0.0;
    char extra = 0;
    if (std::sscanf(args.c_str(), " %lf , %lf %c", &h1, &h2, &extra) != 2) fail("expected two numeric hyperparameters");

    PriorSpec spec;
    try {
      if (family == "normal") spec = PriorSpec::normal(h1, h2);
      else if (family == "gamma") spec = PriorSpec::gamma(h1, h2);
      else if (family == "beta") spec = PriorSpec::beta(h1, h2);
      else fail("unknown prior family '" + family + "'");
    } catch (const ModelError& e) {
      fail(e.what());
    }
    for (auto c : classes)
      if (family_for(c) != spec.family)
        fail("class '" + cls + "' takes a " +
             std::string(family_for(c) == PriorSpec::Family::Normal ? "normal" :
                         family_for(c) == PriorSpec::Family::Gamma  ? "gamma" : "beta") +
             " prior");

    for (int k = 0; k < t.free_count(); ++k) {
      const auto& fp = t.params[k];
      if (std::find(classes.begin(), classes.end(), fp.cls) == classes.end()) continue;
      if (glob_match(pattern, fp.name)) ps.specs[k] = spec;
    }
  }
}

double log_prior_term(const PriorSet& ps, int k, double u, double* dterm) {
  const auto& s = ps.specs[k];
  switch (ps.transforms[k]) {
    case TransformKind::Identity: {
      if (dterm) *dterm = -(u - s.a) / (s.b * s.b);
      return s.log_density(u);
    }
    case TransformKind::Log: {
      // q = sd, variance or precision; log q = c * u
      const double c = ps.scale == ScaleParam::Sd ? 1.0 : ps.scale == ScaleParam::Variance ? 2.0 : -2.0;
      const double q = std::exp(c * u);
      const double norm = s.a * std::log(s.b) - std::lgamma(s.a);
      if (dterm) *dterm = c * s.a - c * s.b * q;
      return norm + s.a * c * u - s.b * q + std::log(std::abs(c));
    }
    case TransformKind::Atanh: {
      // x = (rho + 1) / 2 = sigmoid(2u); Jacobian folded into the exponents
      const double log_x = -softplus(-2.0 * u);
      const double log_1mx = -softplus(2.0 * u);
      const double x = std::exp(log_x);
      const double norm = std::lgamma(s.a + s.b) - std::lgamma(s.a) - std::lgamma(s.b);
      if (dterm) *dterm = 2.0 * s.a * (1.0 - x) - 2.0 * s.b * x;
      return norm + s.a * log_x + s.b * log_1mx + std::numbers::ln2;
    }
  }
  return 0.0;
}

double log_prior_unconstrained(const PriorSet& ps, std::span<const double> u, std::span<double> grad) {
  double total = 0.0;
  for (int k = 0; k < ps.size(); ++k) {
    double d = 0.0;
    total += log_prior_term(ps, k, u[k], grad.empty() ? nullptr : &d);
    if (!grad.empty()) grad[k] += d;
  }
  return total;
}

Eigen::VectorXd sample_prior(const PriorSet& ps, std::mt19937_64& rng) {
  Eigen::VectorXd x(ps.size());
  for (int k = 0; k < ps.size(); ++k) {
    const auto& s = ps.specs[k];
    switch (s.family) {
      case PriorSpec::Family::Normal: x(k) = std::normal_distribution<double>(s.a, s.b)(rng); break;
      case PriorSpec::Family::Gamma: {
        const double q = std::gamma_distribution<double>(s.a, 1.0 / s.b)(rng);
        x(k) = ps.scale == ScaleParam::Sd ? q : ps.scale == ScaleParam::Variance ? std::sqrt(q) : 1.0 / std::sqrt(q);
        break;
      }
      case PriorSpec::Family::Beta: {
        const double g1 = std::gamma_distribution<double>(s.a, 1.0)(rng);
        const double g2 = std::gamma_distribution<double>(s.b, 1.0)(rng);
        x(k) = 2.0 * (g1 / (g1 + g2)) - 1.0;
        break;
      }
    }
  }
  return x;
}

Eigen::VectorXd to_constrained(const PriorSet& ps, std::span<const double> u) {
  Eigen::VectorXd x(ps.size());
  for (int k = 0; k < ps.size(); ++k) x(k) = to_constrained(ps.transforms[k], u[k]);
  return x;
}

Eigen::VectorXd to_unconstrained(const PriorSet& ps, std::span<const double> x) {
  Eigen::VectorXd u(ps.size());
  for (int k = 0; k < ps.size(); ++k) u(k) = to_unconstrained(ps.transforms[k], x[k]);
  return u;
}

}  // namespace semburn
