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

#include "semburn/syntax.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "semburn/errors.hpp"

namespace semburn {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

bool is_name_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
         c == '.';
}

bool is_identifier(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), is_name_char);
}

std::string collapse_spaces(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : trim(s)) {
    if (c == ' ' || c == '\t') {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

// Splits on `sep` outside of quotes and parentheses.
std::vector<std::string_view> split_top_level(std::string_view s, char sep, int line) {
  std::vector<std::string_view> parts;
  char quote = 0;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (quote) {
      if (c == quote) quote = 0;
      continue;
    }
    if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '(') {
      ++depth;
    } else if (c == ')') {
      --depth;
    } else if (c == sep && depth == 0) {
      parts.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  if (quote) throw ParseError(line, "unbalanced quotes");
  if (depth != 0) throw ParseError(line, "unbalanced parentheses");
  parts.push_back(s.substr(start));
  return parts;
}

bool parse_number(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

Modifier parse_modifier(std::string_view text, int line) {
  text = trim(text);
  double v = 0.0;
  if (parse_number(text, v)) return Modifier::fixed(v);
  if (text == "NA") return Modifier::free();
  if (text.starts_with("equal")) {
    auto rest = trim(text.substr(5));
    if (rest.size() < 2 || rest.front() != '(' || rest.back() != ')')
      throw ParseError(line, "malformed modifier '" + std::string(text) + "'");
    auto inner = trim(rest.substr(1, rest.size() - 2));
    if (inner.size() < 2 || (inner.front() != '"' && inner.front() != '\'') ||
        inner.back() != inner.front())
      throw ParseError(line, "unbalanced quotes in '" + std::string(text) + "'");
    auto label = collapse_spaces(inner.substr(1, inner.size() - 2));
    if (label.empty()) throw ParseError(line, "empty equality label");
    return Modifier::equal(std::move(label));
  }
  throw ParseError(line, "malformed modifier '" + std::string(text) + "'");
}

Term parse_term(std::string_view text, int line) {
  text = trim(text);
  if (text.empty()) throw ParseError(line, "dangling '+'");
  auto parts = split_top_level(text, '*', line);
  if (parts.size() > 2) throw ParseError(line, "malformed modifier in '" + std::string(text) + "'");
  Term term;
  auto name = trim(parts.back());
  if (!is_identifier(name)) throw ParseError(line, "invalid variable name '" + std::string(name) + "'");
  term.name = std::string(name);
  if (parts.size() == 2) term.modifier = parse_modifier(parts.front(), line);
  return term;
}

ModelLine parse_statement(std::string_view stmt, int line) {
  // locate the operator: first '=' or '~' outside of quotes
  std::size_t pos = std::string_view::npos;
  char quote = 0;
  for (std::size_t i = 0; i < stmt.size(); ++i) {
    const char c = stmt[i];
    if (quote) {
      if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '=' || c == '~') {
      pos = i;
      break;
    }
  }
  if (pos == std::string_view::npos) throw ParseError(line, "missing operator in '" + std::string(stmt) + "'");

  ModelLine out;
  out.line = line;
  std::size_t op_len = 1;
  if (stmt.substr(pos, 2) == "=~") {
    out.op = Op::Measurement;
    op_len = 2;
  } else if (stmt.substr(pos, 2) == "~~") {
    out.op = Op::Covariance;
    op_len = 2;
  } else if (stmt[pos] == '~') {
    out.op = Op::Regression;
  } else {
    throw ParseError(line, "unknown operator in '" + std::string(stmt) + "'");
  }

  auto lhs = trim(stmt.substr(0, pos));
  if (!is_identifier(lhs)) {
    // things like `a <~ b`, `a := b`, `a == b` end up here
    throw ParseError(line, "unknown operator or invalid left-hand side in '" + std::string(stmt) + "'");
  }
  out.lhs = std::string(lhs);

  auto rhs = trim(stmt.substr(pos + op_len));
  if (!rhs.empty() && (rhs.front() == '~' || rhs.front() == '=' || rhs.front() == '<' || rhs.front() == '>'))
    throw ParseError(line, "unknown operator in '" + std::string(stmt) + "'");
  if (rhs.empty()) throw ParseError(line, "missing right-hand side");

  for (auto part : split_top_level(rhs, '+', line)) out.rhs.push_back(parse_term(part, line));

  const bool has_one = std::any_of(out.rhs.begin(), out.rhs.end(), [](const Term& t) { return t.name == "1"; });
  if (has_one) {
    if (out.op != Op::Regression || out.rhs.size() != 1)
      throw ParseError(line, "intercepts must be written as a separate `name ~ 1` statement");
    out.op = Op::Intercept;
    if (out.rhs.front().modifier.kind == Modifier::Kind::Free) out.rhs.front().modifier = {};
  }
  for (const auto& t : out.rhs) {
    if (t.name != "1" && std::isdigit(static_cast<unsigned char>(t.name.front())))
      throw ParseError(line, "invalid variable name '" + t.name + "'");
  }
  return out;
}

std::string strip_comment(std::string_view line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#' || c == '!') {
      return std::string(line.substr(0, i));
    }
  }
  return std::string(line);
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // prefer the shortest representation that round-trips
  for (int prec = 1; prec <= 17; ++prec) {
    char shorter[64];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    double back = 0.0;
    if (parse_number(shorter, back) && back == v) return shorter;
  }
  return buf;
}

}  // namespace

std::string_view op_token(Op op) {
  switch (op) {
    case Op::Measurement: return "=~";
    case Op::Regression: return "~";
    case Op::Covariance: return "~~";
    case Op::Intercept: return "~";
  }
  return "?";
}

std::string_view class_name(ParamClass c) {
  switch (c) {
    case ParamClass::Lambda: return "lambda";
    case ParamClass::Beta: return "beta";
    case ParamClass::ThetaSd: return "theta_sd";
    case ParamClass::ThetaCor: return "theta_cor";
    case ParamClass::PsiSd: return "psi_sd";
    case ParamClass::PsiCor: return "psi_cor";
    case ParamClass::Nu: return "nu";
    case ParamClass::Alpha: return "alpha";
  }
  return "?";
}

std::vector<ModelLine> parse_model(std::string_view text) {
  std::vector<ModelLine> lines;
  std::string pending;
  int pending_line = 0;
  int lineno = 0;

  auto flush = [&](bool at_end) {
    auto stmt = trim(pending);
    if (stmt.empty()) return;
    if (stmt.back() == '+') {
      if (at_end) throw ParseError(pending_line, "dangling '+'");
      return;  // statement continues on the next line
    }
    for (auto piece : split_top_level(stmt, ';', pending_line)) {
      auto s = trim(piece);
      if (!s.empty()) lines.push_back(parse_statement(s, pending_line));
    }
    pending.clear();
  };

  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++lineno;
    const std::string stripped = strip_comment(text.substr(start, end - start));
    const auto content = trim(stripped);
    if (!content.empty()) {
      const bool continues = !trim(pending).empty() && trim(pending).back() == '+';
      if (!continues) {
        flush(false);
        pending_line = lineno;
        pending = std::string(content);
      } else {
        pending += ' ';
        pending += content;
      }
      auto t = trim(pending);
      if (t.back() != '+') flush(false);
    }
    if (end == text.size()) break;
    start = end + 1;
  }
  flush(true);
  if (lines.empty()) throw ParseError(0, "no model statements");
  return lines;
}

ParamClass ParameterRow::param_class() const {
  switch (matrix) {
    case MatrixId::Lambda: return ParamClass::Lambda;
    case MatrixId::B: return ParamClass::Beta;
    case MatrixId::Theta: return row == col ? ParamClass::ThetaSd : ParamClass::ThetaCor;
    case MatrixId::Psi: return row == col ? ParamClass::PsiSd : ParamClass::PsiCor;
    case MatrixId::Nu: return ParamClass::Nu;
    case MatrixId::Alpha: return ParamClass::Alpha;
  }
  return ParamClass::Nu;
}

std::string ParameterRow::name() const {
  if (op == Op::Intercept) return lhs + " ~ 1";
  return lhs + " " + std::string(op_token(op)) + " " + rhs;
}

int ParameterTable::find(std::string_view name) const {
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].name() == name) return static_cast<int>(i);
  return -1;
}

int ParameterTable::observed_index(std::string_view name) const {
  auto it = std::find(observed.begin(), observed.end(), name);
  return it == observed.end() ? -1 : static_cast<int>(it - observed.begin());
}

int ParameterTable::latent_index(std::string_view name) const {
  auto it = std::find(latent.begin(), latent.end(), name);
  return it == latent.end() ? -1 : static_cast<int>(it - latent.begin());
}

std::vector<std::string> referenced_observed(std::span<const ModelLine> lines) {
  std::set<std::string> latent;
  for (const auto& l : lines)
    if (l.op == Op::Measurement) latent.insert(l.lhs);
  std::vector<std::string> out;
  auto add = [&](const std::string& n) {
    if (n == "1" || latent.count(n)) return;
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  };
  for (const auto& l : lines) {
    add(l.lhs);
    for (const auto& t : l.rhs) add(t.name);
  }
  return out;
}

ParameterTable build_parameter_table(std::span<const ModelLine> lines,
                                     std::span<const std::string> available) {
  if (lines.empty()) throw ModelError("no model statements");
  ParameterTable table;

  for (const auto& l : lines)
    if (l.op == Op::Measurement && table.latent_index(l.lhs) < 0) table.latent.push_back(l.lhs);
  const std::size_t declared_latent = table.latent.size();

  const std::set<std::string, std::less<>> avail(available.begin(), available.end());
  auto touch = [&](const std::string& name, int line) {
    if (name == "1" || table.latent_index(name) >= 0) return;
    if (!avail.count(name))
      throw ModelError("line " + std::to_string(line) + ": variable '" + name +
                       "' is neither a latent variable nor an observed variable");
    if (table.observed_index(name) < 0) table.observed.push_back(name);
  };
  for (const auto& l : lines) {
    touch(l.lhs, l.line);
    for (const auto& t : l.rhs) touch(t.name, l.line);
  }

  // Observed variables taking part in latent regressions become single-indicator
  // latents (loading 1, residual variance 0).
  std::vector<bool> obs_upgraded(table.observed.size(), false);
  for (const auto& l : lines) {
    if (l.op != Op::Regression) continue;
    if (int i = table.observed_index(l.lhs); i >= 0) obs_upgraded[i] = true;
    for (const auto& t : l.rhs)
      if (int i = table.observed_index(t.name); i >= 0) obs_upgraded[i] = true;
  }
  table.upgraded.assign(declared_latent, false);
  for (std::size_t i = 0; i < table.observed.size(); ++i) {
    if (!obs_upgraded[i]) continue;
    table.latent.push_back(table.observed[i]);
    table.upgraded.push_back(true);
  }

  auto lat = [&](const std::string& n) { return table.latent_index(n); };
  auto obs = [&](const std::string& n) { return table.observed_index(n); };
  auto plain_observed = [&](const std::string& n) { return lat(n) < 0 && obs(n) >= 0; };

  std::vector<ParameterRow> rows;
  std::map<std::string, std::size_t> by_name;
  auto add_row = [&](ParameterRow r, int line) {
    const auto key = r.name();
    std::string mirrored;
    if (r.op == Op::Covariance && r.lhs != r.rhs) mirrored = r.rhs + " ~~ " + r.lhs;
    if (by_name.count(key) || (!mirrored.empty() && by_name.count(mirrored))) {
      throw ModelError("line " + std::to_string(line) + ": parameter '" + key + "' declared twice");
    }
    by_name[key] = rows.size();
    rows.push_back(std::move(r));
  };
  auto apply = [&](ParameterRow& r, const Modifier& m) {
    switch (m.kind) {
      case Modifier::Kind::None:
      case Modifier::Kind::Free: r.free = true; break;
      case Modifier::Kind::Fixed:
        r.free = false;
        r.value = m.value;
        break;
      case Modifier::Kind::Equal:
        r.free = true;
        r.equal_to = m.label;
        break;
    }
  };

  std::vector<bool> first_seen(table.latent.size(), false);
  for (const auto& l : lines) {
    for (const auto& t : l.rhs) {
      ParameterRow r;
      r.lhs = l.lhs;
      r.op = l.op;
      r.rhs = t.name;
      switch (l.op) {
        case Op::Measurement: {
          const int f = lat(l.lhs);
          const bool first = !first_seen[f];
          first_seen[f] = true;
          if (t.name == l.lhs) throw ModelError("line " + std::to_string(l.line) + ": latent '" + l.lhs + "' measured by itself");
          if (plain_observed(t.name)) {
            r.matrix = MatrixId::Lambda;
            r.row = obs(t.name);
          } else {
            r.matrix = MatrixId::B;
            r.row = lat(t.name);
          }
          r.col = f;
          if (t.modifier.kind == Modifier::Kind::None && first) {
            r.free = false;
            r.value = 1.0;
            r.default_scaling = true;
          } else {
            apply(r, t.modifier);
          }
          break;
        }
        case Op::Regression: {
          if (t.name == l.lhs) throw ModelError("line " + std::to_string(l.line) + ": '" + l.lhs + "' regressed on itself");
          r.matrix = MatrixId::B;
          r.row = lat(l.lhs);
          r.col = lat(t.name);
          apply(r, t.modifier);
          break;
        }
        case Op::Intercept: {
          if (obs(l.lhs) >= 0) {
            r.matrix = MatrixId::Nu;
            r.row = obs(l.lhs);
          } else {
            r.matrix = MatrixId::Alpha;
            r.row = lat(l.lhs);
          }
          r.col = 0;
          apply(r, t.modifier);
          break;
        }
        case Op::Covariance: {
          const bool a_lat = lat(l.lhs) >= 0, b_lat = lat(t.name) >= 0;
          if (a_lat != b_lat)
            throw ModelError("line " + std::to_string(l.line) + ": covariance between latent and observed variable ('" +
                             l.lhs + " ~~ " + t.name + "') is not supported");
          r.matrix = a_lat ? MatrixId::Psi : MatrixId::Theta;
          r.row = a_lat ? lat(l.lhs) : obs(l.lhs);
          r.col = a_lat ? lat(t.name) : obs(t.name);
          apply(r, t.modifier);
          if (!r.free && r.row == r.col && r.value < 0.0)
            throw ModelError("line " + std::to_string(l.line) + ": negative fixed variance for '" + r.name() + "'");
          if (!r.free && r.row != r.col && std::abs(r.value) > 1.0)
            throw ModelError("line " + std::to_string(l.line) + ": fixed covariances are read as correlations and must lie in [-1, 1]");
          break;
        }
      }
      add_row(std::move(r), l.line);
    }
  }

  auto has = [&](const std::string& n) { return by_name.count(n) > 0; };

  for (std::size_t i = 0; i < table.observed.size(); ++i) {
    const auto& n = table.observed[i];
    if (obs_upgraded[i] || has(n + " ~~ " + n)) continue;
    ParameterRow r{.lhs = n, .op = Op::Covariance, .rhs = n, .matrix = MatrixId::Theta,
                   .row = static_cast<int>(i), .col = static_cast<int>(i), .equal_to = {}};
    add_row(std::move(r), 0);
  }
  for (std::size_t j = 0; j < table.latent.size(); ++j) {
    const auto& n = table.latent[j];
    if (has(n + " ~~ " + n)) continue;
    ParameterRow r{.lhs = n, .op = Op::Covariance, .rhs = n, .matrix = MatrixId::Psi,
                   .row = static_cast<int>(j), .col = static_cast<int>(j), .equal_to = {}};
    add_row(std::move(r), 0);
  }
  std::vector<bool> exogenous(table.latent.size(), true);
  for (const auto& r : rows)
    if (r.matrix == MatrixId::B) exogenous[r.row] = false;
  for (std::size_t i = 0; i < table.latent.size(); ++i) {
    for (std::size_t j = i + 1; j < table.latent.size(); ++j) {
      if (!exogenous[i] || !exogenous[j]) continue;
      const auto& a = table.latent[i];
      const auto& b = table.latent[j];
      if (has(a + " ~~ " + b) || has(b + " ~~ " + a)) continue;
      ParameterRow r{.lhs = a, .op = Op::Covariance, .rhs = b, .matrix = MatrixId::Psi,
                   .row = static_cast<int>(i), .col = static_cast<int>(j), .equal_to = {}};
      add_row(std::move(r), 0);
    }
  }
  for (std::size_t i = 0; i < table.observed.size(); ++i) {
    const auto& n = table.observed[i];
    if (has(n + " ~ 1")) continue;
    ParameterRow r{.lhs = n, .op = Op::Intercept, .rhs = "1", .matrix = MatrixId::Nu,
                   .row = static_cast<int>(i), .col = 0, .equal_to = {}};
    add_row(std::move(r), 0);
  }

  std::stable_sort(rows.begin(), rows.end(), [](const ParameterRow& a, const ParameterRow& b) {
    return a.param_class() < b.param_class();
  });
  table.rows = std::move(rows);

  // Equality labels collapse onto a single free representative.
  for (auto& r : table.rows) {
    if (r.equal_to.empty()) continue;
    std::string target = r.equal_to;
    for (int hops = 0;; ++hops) {
      const int t = table.find(target);
      if (t < 0) throw ModelError("equality label '" + target + "' references a nonexistent parameter");
      const auto& tr = table.rows[t];
      if (tr.param_class() != r.param_class())
        throw ModelError("equality constraint '" + r.name() + "' = '" + target +
                         "' crosses parameter classes (unsupported)");
      if (tr.name() == r.name() || hops > static_cast<int>(table.rows.size()))
        throw ModelError("circular equality constraint at '" + r.name() + "'");
      if (!tr.free) throw ModelError("equality label '" + target + "' references a fixed parameter");
      if (tr.equal_to.empty()) break;
      target = tr.equal_to;
    }
    r.equal_to = target;
  }
  return table;
}

std::string render_model(const ParameterTable& table) {
  std::set<std::string> scaled;  // latents whose first measurement row has been emitted
  std::string out;
  for (const auto& r : table.rows) {
    std::string mod;
    const bool first_measure = r.op == Op::Measurement && scaled.insert(r.lhs).second;
    if (!r.equal_to.empty()) {
      mod = "equal(\"" + r.equal_to + "\")*";
    } else if (!r.free) {
      if (!r.default_scaling) mod = format_value(r.value) + "*";
    } else if (first_measure) {
      mod = "NA*";
    }
    out += r.lhs;
    out += ' ';
    out += op_token(r.op);
    out += ' ';
    out += mod;
    out += r.op == Op::Intercept ? "1" : r.rhs;
    out += '\n';
  }
  return out;
}

}  // namespace semburn
