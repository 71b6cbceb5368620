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

#ifndef SEMBURN_MODEL_HPP
#define SEMBURN_MODEL_HPP

#include <Eigen/Dense>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "semburn/syntax.hpp"

namespace semburn {

/// A template entry: either a fixed value or a reference to a free parameter.
struct Slot {
  int index = -1;  // representative free-parameter index, -1 when fixed
  double value = 0.0;
  bool is_free() const { return index >= 0; }
};

class SlotMatrix {
 public:
  SlotMatrix() = default;
  SlotMatrix(int rows, int cols) : rows_(rows), cols_(cols), slots_(static_cast<std::size_t>(rows) * cols) {}
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  Slot& operator()(int i, int j) { return slots_[static_cast<std::size_t>(i) * cols_ + j]; }
  const Slot& operator()(int i, int j) const { return slots_[static_cast<std::size_t>(i) * cols_ + j]; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<Slot> slots_;
};

struct FreeParameter {
  std::string name;  // canonical name of the representative row
  ParamClass cls = ParamClass::Nu;
  MatrixId matrix = MatrixId::Nu;
  int row = 0;
  int col = 0;
};

/// Sparsity/fixed-value skeletons of the all-y matrices. Covariance matrices
/// are split as Theta = D R D (and likewise Psi): sds in `theta_sd`,
/// correlations in `theta_cor` (unit diagonal, symmetric slots share an index).
struct MatrixTemplates {
  int p = 0;  // observed variables
  int m = 0;  // latent variables
  std::vector<std::string> observed;
  std::vector<std::string> latent;

  std::vector<Slot> nu;     // p
  std::vector<Slot> alpha;  // m
  SlotMatrix lambda;        // p x m
  SlotMatrix beta;          // m x m
  std::vector<Slot> theta_sd;
  SlotMatrix theta_cor;
  std::vector<Slot> psi_sd;
  SlotMatrix psi_cor;

  std::vector<FreeParameter> params;  // indexed by representative index
  std::vector<int> equality_map;      // table row -> representative index (-1 when fixed)

  int free_count() const { return static_cast<int>(params.size()); }
};

struct StructureFlags {
  bool b_recursive = true;
  bool psi_diagonal = true;
  bool theta_diagonal = true;
  std::vector<int> permutation;  // topological latent order, valid when b_recursive
};

/// Concrete matrices for one parameter vector.
struct SemMatrices {
  Eigen::VectorXd nu, alpha;
  Eigen::MatrixXd lambda, beta;
  Eigen::VectorXd theta_sd, psi_sd;
  Eigen::MatrixXd theta_cor, psi_cor;
  Eigen::MatrixXd theta, psi;  // D R D
};

MatrixTemplates build_templates(const ParameterTable& table);

StructureFlags analyze_structure(const MatrixTemplates& t);

/// Throws std::invalid_argument on a length mismatch, negative sd or a
/// correlation outside [-1, 1].
SemMatrices assemble(const MatrixTemplates& t, std::span<const double> theta_free);

/// Reads representative values back out of assembled matrices.
Eigen::VectorXd extract_free(const MatrixTemplates& t, const SemMatrices& sm);

// Parse, expand and compile in one step. `available` lists the observed
// variable names the data can supply.
struct CompiledModel {
  std::vector<ModelLine> lines;
  ParameterTable table;
  MatrixTemplates templates;
  StructureFlags flags;
};
CompiledModel compile_model(std::string_view text, std::span<const std::string> available);

}  // namespace semburn

#endif  // SEMBURN_MODEL_HPP
