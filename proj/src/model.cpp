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

#include "semburn/model.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "semburn/errors.hpp"

namespace semburn {

MatrixTemplates build_templates(const ParameterTable& table) {
  MatrixTemplates t;
  t.observed = table.observed;
  t.latent = table.latent;
  t.p = static_cast<int>(table.observed.size());
  t.m = static_cast<int>(table.latent.size());
  const int p = t.p, m = t.m;

  t.nu.assign(p, Slot{});
  t.alpha.assign(m, Slot{});
  t.lambda = SlotMatrix(p, m);
  t.beta = SlotMatrix(m, m);
  t.theta_sd.assign(p, Slot{});
  t.theta_cor = SlotMatrix(p, p);
  t.psi_sd.assign(m, Slot{});
  t.psi_cor = SlotMatrix(m, m);
  for (int i = 0; i < p; ++i) t.theta_cor(i, i).value = 1.0;
  for (int j = 0; j < m; ++j) t.psi_cor(j, j).value = 1.0;

  // upgraded observed variables: loading 1 on their own latent, residual sd 0
  for (int j = 0; j < m; ++j) {
    if (j >= static_cast<int>(table.upgraded.size()) || !table.upgraded[j]) continue;
    const int i = table.observed_index(table.latent[j]);
    t.lambda(i, j).value = 1.0;
    t.theta_sd[i].value = 0.0;
  }

  // representatives first, in table order
  t.equality_map.assign(table.rows.size(), -1);
  std::map<std::string, int> rep_index;
  for (std::size_t k = 0; k < table.rows.size(); ++k) {
    const auto& r = table.rows[k];
    if (!r.free || !r.equal_to.empty()) continue;
    const int idx = t.free_count();
    t.params.push_back({r.name(), r.param_class(), r.matrix, r.row, r.col});
    rep_index[r.name()] = idx;
    t.equality_map[k] = idx;
  }
  for (std::size_t k = 0; k < table.rows.size(); ++k) {
    const auto& r = table.rows[k];
    if (!r.free || r.equal_to.empty()) continue;
    auto it = rep_index.find(r.equal_to);
    if (it == rep_index.end()) throw ModelError("unresolved equality label '" + r.equal_to + "'");
    t.equality_map[k] = it->second;
  }

  for (std::size_t k = 0; k < table.rows.size(); ++k) {
    const auto& r = table.rows[k];
    Slot s;
    s.index = t.equality_map[k];
    s.value = r.free ? 0.0 : r.value;
    switch (r.matrix) {
      case MatrixId::Nu: t.nu[r.row] = s; break;
      case MatrixId::Alpha: t.alpha[r.row] = s; break;
      case MatrixId::Lambda: t.lambda(r.row, r.col) = s; break;
      case MatrixId::B:
        if (r.row == r.col) throw ModelError("self-loop in B for '" + r.name() + "'");
        t.beta(r.row, r.col) = s;
        break;
      case MatrixId::Theta:
      case MatrixId::Psi: {
        const bool theta = r.matrix == MatrixId::Theta;
        if (r.row == r.col) {
          if (!s.is_free()) s.value = std::sqrt(r.value);  // fixed variance -> fixed sd
          (theta ? t.theta_sd : t.psi_sd)[r.row] = s;
        } else {
          auto& cor = theta ? t.theta_cor : t.psi_cor;
          cor(r.row, r.col) = s;
          cor(r.col, r.row) = s;
        }
        break;
      }
    }
  }
  return t;
}

StructureFlags analyze_structure(const MatrixTemplates& t) {
  StructureFlags f;
  const int m = t.m;
  auto nonzero = [](const Slot& s) { return s.is_free() || s.value != 0.0; };

  for (int i = 0; i < t.p && f.theta_diagonal; ++i)
    for (int j = 0; j < t.p; ++j)
      if (i != j && nonzero(t.theta_cor(i, j))) {
        f.theta_diagonal = false;
        break;
      }
  for (int i = 0; i < m && f.psi_diagonal; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j && nonzero(t.psi_cor(i, j))) {
        f.psi_diagonal = false;
        break;
      }

  // Kahn elimination; edge j -> i when eta_i depends on eta_j (B(i, j) != 0).
  std::vector<int> indegree(m, 0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (nonzero(t.beta(i, j))) ++indegree[i];
  std::vector<bool> placed(m, false);
  for (int step = 0; step < m; ++step) {
    int next = -1;
    for (int i = 0; i < m; ++i)
      if (!placed[i] && indegree[i] == 0) {
        next = i;  // lowest original index wins ties
        break;
      }
    if (next < 0) {
      f.b_recursive = false;
      f.permutation.clear();
      return f;
    }
    placed[next] = true;
    f.permutation.push_back(next);
    for (int i = 0; i < m; ++i)
      if (nonzero(t.beta(i, next))) --indegree[i];
  }
  return f;
}

SemMatrices assemble(const MatrixTemplates& t, std::span<const double> x) {
  if (static_cast<int>(x.size()) != t.free_count())
    throw std::invalid_argument("parameter vector has length " + std::to_string(x.size()) + ", expected " +
                                std::to_string(t.free_count()));
  auto val = [&](const Slot& s) { return s.is_free() ? x[s.index] : s.value; };
  const int p = t.p, m = t.m;
  SemMatrices sm;
  sm.nu.resize(p);
  sm.alpha.resize(m);
  sm.lambda.resize(p, m);
  sm.beta.resize(m, m);
  sm.theta_sd.resize(p);
  sm.psi_sd.resize(m);
  sm.theta_cor.resize(p, p);
  sm.psi_cor.resize(m, m);

  for (int i = 0; i < p; ++i) {
    sm.nu(i) = val(t.nu[i]);
    sm.theta_sd(i) = val(t.theta_sd[i]);
    for (int j = 0; j < m; ++j) sm.lambda(i, j) = val(t.lambda(i, j));
    for (int j = 0; j < p; ++j) sm.theta_cor(i, j) = val(t.theta_cor(i, j));
  }
  for (int i = 0; i < m; ++i) {
    sm.alpha(i) = val(t.alpha[i]);
    sm.psi_sd(i) = val(t.psi_sd[i]);
    for (int j = 0; j < m; ++j) {
      sm.beta(i, j) = val(t.beta(i, j));
      sm.psi_cor(i, j) = val(t.psi_cor(i, j));
    }
  }
  if ((sm.theta_sd.array() < 0.0).any() || (sm.psi_sd.array() < 0.0).any())
    throw std::invalid_argument("negative standard deviation");
  if ((sm.theta_cor.array().abs() > 1.0).any() || (sm.psi_cor.array().abs() > 1.0).any())
    throw std::invalid_argument("correlation outside [-1, 1]");

  sm.theta = sm.theta_sd.asDiagonal() * sm.theta_cor * sm.theta_sd.asDiagonal();
  sm.psi = sm.psi_sd.asDiagonal() * sm.psi_cor * sm.psi_sd.asDiagonal();
  return sm;
}

Eigen::VectorXd extract_free(const MatrixTemplates& t, const SemMatrices& sm) {
  Eigen::VectorXd x(t.free_count());
  for (int k = 0; k < t.free_count(); ++k) {
    const auto& fp = t.params[k];
    switch (fp.matrix) {
      case MatrixId::Nu: x(k) = sm.nu(fp.row); break;
      case MatrixId::Alpha: x(k) = sm.alpha(fp.row); break;
      case MatrixId::Lambda: x(k) = sm.lambda(fp.row, fp.col); break;
      case MatrixId::B: x(k) = sm.beta(fp.row, fp.col); break;
      case MatrixId::Theta: x(k) = fp.row == fp.col ? sm.theta_sd(fp.row) : sm.theta_cor(fp.row, fp.col); break;
      case MatrixId::Psi: x(k) = fp.row == fp.col ? sm.psi_sd(fp.row) : sm.psi_cor(fp.row, fp.col); break;
    }
  }
  return x;
}

CompiledModel compile_model(std::string_view text, std::span<const std::string> available) {
  CompiledModel c;
  c.lines = parse_model(text);
  c.table = build_parameter_table(c.lines, available);
  c.templates = build_templates(c.table);
  c.flags = analyze_structure(c.templates);
  return c;
}

}  // namespace semburn
