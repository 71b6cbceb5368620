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

#ifndef SEMBURN_SYNTAX_HPP
#define SEMBURN_SYNTAX_HPP

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace semburn {

enum class Op { Measurement, Regression, Covariance, Intercept };

/// "=~", "~", "~~" or "~" (intercepts render as `lhs ~ 1`).
std::string_view op_token(Op op);

struct Modifier {
  enum class Kind { None, Fixed, Equal, Free };
  Kind kind = Kind::None;
  double value = 0.0;  // Fixed
  std::string label;   // Equal: canonical name of the target parameter

  static Modifier fixed(double v) { return {Kind::Fixed, v, {}}; }
  static Modifier equal(std::string target) { return {Kind::Equal, 0.0, std::move(target)}; }
  static Modifier free() { return {Kind::Free, 0.0, {}}; }

  bool operator==(const Modifier&) const = default;
};

/// One right-hand-side entry. For intercept lines `name` is "1".
struct Term {
  std::string name;
  Modifier modifier;
  bool operator==(const Term&) const = default;
};

struct ModelLine {
  std::string lhs;
  Op op = Op::Measurement;
  std::vector<Term> rhs;
  int line = 0;  // 1-based source line, for diagnostics

  bool operator==(const ModelLine& o) const {
    return lhs == o.lhs && op == o.op && rhs == o.rhs;
  }
};

/// Parses lavaan-style model text. Statements are separated by newlines or
/// `;`, `#` starts a comment. `a ~~ b + c` yields one line with two rhs
/// entries; expansion into pairs happens in build_parameter_table.
/// Throws ParseError.
std::vector<ModelLine> parse_model(std::string_view text);

enum class MatrixId { Nu, Alpha, Lambda, B, Theta, Psi };

/// Parameter classes in reporting order. Equality constraints may not cross
/// classes and every class carries one prior family.
enum class ParamClass { Lambda, Beta, ThetaSd, ThetaCor, PsiSd, PsiCor, Nu, Alpha };

std::string_view class_name(ParamClass c);

struct ParameterRow {
  std::string lhs;
  Op op = Op::Measurement;
  std::string rhs;  // "1" for intercepts
  MatrixId matrix = MatrixId::Lambda;
  int row = 0;  // observed index for Nu/Lambda/Theta rows, latent index otherwise
  int col = 0;
  bool free = true;
  // Fixed value on the user's scale: variances stay variances here, off-diagonal
  // covariance entries are read as correlations.
  double value = 0.0;
  std::string equal_to;          // canonical name of the equality target, or empty
  bool default_scaling = false;  // first loading auto-fixed to 1

  ParamClass param_class() const;
  /// Canonical `lhs op rhs` name with single spaces, e.g. "ind60 =~ x2", "x1 ~ 1".
  std::string name() const;
  bool operator==(const ParameterRow&) const = default;
};

struct ParameterTable {
  std::vector<std::string> observed;  // model order (first appearance)
  std::vector<std::string> latent;    // declared latents, then upgraded observed variables
  std::vector<bool> upgraded;         // per latent: observed variable promoted to latent
  std::vector<ParameterRow> rows;     // grouped by ParamClass, first appearance within class

  /// Index of the row with the given canonical name, or -1.
  int find(std::string_view name) const;
  int observed_index(std::string_view name) const;
  int latent_index(std::string_view name) const;
  bool operator==(const ParameterTable&) const = default;
};

/// Names that are not declared latent, in first-appearance order.
std::vector<std::string> referenced_observed(std::span<const ModelLine> lines);

/// Expands parsed statements into a parameter table with lavaan-style
/// defaults. `available` lists the observed variable names (usually the data
/// columns). Throws ModelError.
ParameterTable build_parameter_table(std::span<const ModelLine> lines,
                                     std::span<const std::string> available);

/// Canonical syntax such that parse + build reproduces `table`.
std::string render_model(const ParameterTable& table);

}  // namespace semburn

#endif  // SEMBURN_SYNTAX_HPP
