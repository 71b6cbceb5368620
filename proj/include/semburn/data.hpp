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

#ifndef SEMBURN_DATA_HPP
#define SEMBURN_DATA_HPP

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace semburn {

/// Rectangular data in model column order. Missing values are NaN.
struct Dataset {
  std::vector<std::string> columns;
  Eigen::MatrixXd values;  // n x p

  int n() const { return static_cast<int>(values.rows()); }
  int p() const { return static_cast<int>(values.cols()); }
  static bool is_missing(double v) { return std::isnan(v); }
};

/// Rows sharing one missingness pattern, with sufficient statistics over the
/// observed coordinates.
struct PatternGroup {
  std::vector<int> observed_idx;
  std::vector<int> row_indices;
  Eigen::MatrixXd values;   // count x k, observed coordinates only
  Eigen::VectorXd mean;     // k
  Eigen::MatrixXd crossprod;  // k x k, centred at `mean`

  int count() const { return static_cast<int>(row_indices.size()); }
};

/// Reads a header-first CSV and selects `wanted` columns in that order.
/// Empty cells, `NA` and `NaN` (any case) are missing. Throws DataError.
Dataset load_csv(const std::filesystem::path& path, std::span<const std::string> wanted);

/// Same, from in-memory text; `source` names the input in error messages.
Dataset parse_csv(std::string_view text, std::span<const std::string> wanted,
                  const std::string& source = "<memory>");

/// Builds a dataset from a matrix (NaN = missing). Throws DataError on an
/// entirely missing row.
Dataset make_dataset(std::vector<std::string> columns, Eigen::MatrixXd values);

/// One group per distinct pattern, largest first; ties ordered by pattern.
std::vector<PatternGroup> group_patterns(const Dataset& d);

/// RFC-4180 field splitting of a single record (no embedded newlines).
std::vector<std::string> split_csv_record(std::string_view line);

}  // namespace semburn

#endif  // SEMBURN_DATA_HPP
