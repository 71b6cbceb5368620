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


// Subcommand implementations behind the semburn executable.

#ifndef SEMBURN_TOOLS_COMMANDS_HPP
#define SEMBURN_TOOLS_COMMANDS_HPP

#include <cstdint>
#include <optional>
#include <string>

#include "semburn/priors.hpp"
#include "semburn/sampler.hpp"
#include "semburn/sbc.hpp"

namespace semburn::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kModel = 2, kConvergence = 3 };

// A missing or unreadable input or output location.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string model_path;
  std::string data_path;
  std::string priors = "set1";  // set1, set2 or a file of override rules
  std::string scale_param = "sd";
  bool no_simplify = false;
  std::string out_dir = ".";
};

struct FitOptions {
  CommonOptions common;
  SamplerConfig sampler;
  std::string mode = "marginal";
  bool latent_scores = false;
  double rhat_threshold = 1.05;
};

struct MlCommandOptions {
  CommonOptions common;
  int restarts = 1;
  std::uint64_t seed = 1;
  std::string compare;  // summary.csv of a previous fit
};

struct SbcCommandOptions {
  CommonOptions common;
  SbcConfig sbc;
  std::string mode = "marginal";
  bool ranks_csv = false;
};

struct LoglikOptions {
  CommonOptions common;
  std::string theta_path;
};

struct SimulateOptions {
  std::string model_path;
  std::string truth_path;
  int n = 500;
  std::uint64_t seed = 1;
  std::string out_path;
};

int cmd_fit(const FitOptions& o);
int cmd_ml(const MlCommandOptions& o);
int cmd_sbc(const SbcCommandOptions& o);
int cmd_loglik(const LoglikOptions& o);
int cmd_simulate(const SimulateOptions& o);

// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace semburn::cli

#endif  // SEMBURN_TOOLS_COMMANDS_HPP
