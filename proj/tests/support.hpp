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

#ifndef SEMBURN_TESTS_SUPPORT_HPP
#define SEMBURN_TESTS_SUPPORT_HPP

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "semburn/data.hpp"
#include "semburn/likelihood.hpp"
#include "semburn/model.hpp"
#include "semburn/priors.hpp"

namespace semburn::testing {

inline std::filesystem::path source_dir() { return SEMBURN_SOURCE_DIR; }

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Bundled {
  CompiledModel model;
  Dataset data;
};

// name: political_democracy, holzinger_swineford or milcs
inline Bundled load_bundled(const std::string& name) {
  const auto text = slurp(source_dir() / "models" / (name + ".lav"));
  const auto refs = referenced_observed(parse_model(text));
  Bundled b;
  b.model = compile_model(text, refs);
  b.data = load_csv(source_dir() / "data" / (name + ".csv"), b.model.table.observed);
  return b;
}

inline Bundled compile_with_data(const std::string& text, const Dataset& data) {
  Bundled b;
  b.model = compile_model(text, data.columns);
  Eigen::MatrixXd v(data.n(), b.model.table.observed.size());
  for (std::size_t j = 0; j < b.model.table.observed.size(); ++j) {
    const auto it = std::find(data.columns.begin(), data.columns.end(), b.model.table.observed[j]);
    v.col(j) = data.values.col(it - data.columns.begin());
  }
  b.data = make_dataset(b.model.table.observed, std::move(v));
  return b;
}

// Unconstrained point with accepted implied moments, drawn uniformly on [-2, 2].
inline Eigen::VectorXd random_valid_point(const SemDensity& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Eigen::VectorXd u(d.dim());
    for (auto& x : u) x = unif(rng);
    if (!d.evaluate(u, false).rejected()) return u;
  }
  throw std::runtime_error("no valid point found");
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1e-300, std::abs(b)); }

}  // namespace semburn::testing

#endif  // SEMBURN_TESTS_SUPPORT_HPP
