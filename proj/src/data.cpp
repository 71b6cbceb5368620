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

#include "semburn/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "semburn/errors.hpp"

namespace semburn {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool is_missing_token(std::string_view s) {
  if (s.empty()) return true;
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower == "na" || lower == "nan";
}

// Splits text into records, honouring quoted newlines.
std::vector<std::string> split_records(std::string_view text) {
  std::vector<std::string> records;
  std::string current;
  bool quoted = false;
  for (char c : text) {
    if (c == '"') quoted = !quoted;
    if (c == '\n' && !quoted) {
      records.push_back(std::move(current));
      current.clear();
      continue;
    }
    current.push_back(c);
  }
  if (!current.empty()) records.push_back(std::move(current));
  return records;
}

}  // namespace

std::vector<std::string> split_csv_record(std::string_view line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

Dataset make_dataset(std::vector<std::string> columns, Eigen::MatrixXd values) {
  for (Eigen::Index r = 0; r < values.rows(); ++r)
    if (values.row(r).array().isNaN().all())
      throw DataError("row " + std::to_string(r + 1) + " has no observed values");
  return Dataset{std::move(columns), std::move(values)};
}

Dataset parse_csv(std::string_view text, std::span<const std::string> wanted, const std::string& source) {
  auto records = split_records(text);
  while (!records.empty() && trim(records.back()).empty()) records.pop_back();
  if (records.empty()) throw DataError(source + ": empty file");

  const auto header = split_csv_record(records.front());
  std::vector<int> pick;
  for (const auto& w : wanted) {
    auto it = std::find_if(header.begin(), header.end(), [&](const std::string& h) { return trim(h) == w; });
    if (it == header.end()) throw DataError(source + ": missing column '" + w + "'");
    pick.push_back(static_cast<int>(it - header.begin()));
  }

  std::vector<std::vector<double>> rows;
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (trim(records[r]).empty()) continue;
    const auto fields = split_csv_record(records[r]);
    std::vector<double> row;
    row.reserve(pick.size());
    for (std::size_t c = 0; c < pick.size(); ++c) {
      const int col = pick[c];
      const auto cell = col < static_cast<int>(fields.size()) ? trim(fields[col]) : std::string_view{};
      if (is_missing_token(cell)) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v = 0.0;
      auto s = cell;
      if (!s.empty() && s.front() == '+') s.remove_prefix(1);
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size())
        throw DataError(source + ": non-numeric value '" + std::string(cell) + "' in column '" + wanted[c] +
                        "' (line " + std::to_string(r + 1) + ")");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(source + ": no data rows");

  Eigen::MatrixXd values(rows.size(), pick.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < pick.size(); ++c) values(r, c) = rows[r][c];
  try {
    return make_dataset({wanted.begin(), wanted.end()}, std::move(values));
  } catch (const DataError& e) {
    throw DataError(source + ": " + e.what());
  }
}

Dataset load_csv(const std::filesystem::path& path, std::span<const std::string> wanted) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open data file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), wanted, path.string());
}

std::vector<PatternGroup> group_patterns(const Dataset& d) {
  // key: '1' observed / '0' missing per column
  std::map<std::string, std::vector<int>> by_pattern;
  for (int r = 0; r < d.n(); ++r) {
    std::string key(d.p(), '0');
    for (int c = 0; c < d.p(); ++c)
      if (!Dataset::is_missing(d.values(r, c))) key[c] = '1';
    by_pattern[key].push_back(r);
  }
  std::vector<std::pair<std::string, std::vector<int>>> ordered(by_pattern.begin(), by_pattern.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second.size() > b.second.size(); });

  std::vector<PatternGroup> groups;
  groups.reserve(ordered.size());
  for (auto& [key, rows] : ordered) {
    PatternGroup g;
    for (int c = 0; c < d.p(); ++c)
      if (key[c] == '1') g.observed_idx.push_back(c);
    g.row_indices = std::move(rows);
    const int k = static_cast<int>(g.observed_idx.size());
    g.values.resize(g.count(), k);
    for (int r = 0; r < g.count(); ++r)
      for (int c = 0; c < k; ++c) g.values(r, c) = d.values(g.row_indices[r], g.observed_idx[c]);
    g.mean = g.values.colwise().mean().transpose();
    const Eigen::MatrixXd centred = g.values.rowwise() - g.mean.transpose();
    g.crossprod = centred.transpose() * centred;
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace semburn
