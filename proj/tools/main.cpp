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


// semburn: Bayesian SEM fitting, ML estimation and calibration from the shell.

#include <CLI11.hpp>
#include <iostream>

#include "commands.hpp"
#include "semburn/errors.hpp"
#include "semburn/version.hpp"

namespace {

using namespace semburn;
using namespace semburn::cli;

void add_common(CLI::App* app, CommonOptions& o, bool with_data) {
  app->add_option("model", o.model_path, "model file (lavaan syntax)")->required();
  if (with_data) app->add_option("data", o.data_path, "data file (CSV with header)")->required();
  app->add_option("--priors", o.priors, "set1 (default), set2, or a file of prior override rules");
  app->add_option("--scale-param", o.scale_param, "scale of Gamma priors on residual scales")
      ->check(CLI::IsMember({"sd", "var", "prec"}));
  app->add_flag("--no-simplify", o.no_simplify, "use the general moment path regardless of structure");
  app->add_option("--out", o.out_dir, "output directory");
}

void add_sampler(CLI::App* app, SamplerConfig& c, std::string& mode) {
  app->add_option("--chains", c.chains, "number of chains");
  app->add_option("--warmup", c.warmup, "warmup iterations per chain");
  app->add_option("--samples", c.samples, "post-warmup draws per chain");
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--mode", mode, "likelihood used for sampling")->check(CLI::IsMember({"marginal", "conditional"}));
  app->add_option("--max-treedepth", c.max_treedepth, "maximum tree depth");
  app->add_option("--target-accept", c.target_accept, "step size adaptation target");
  app->add_option("--threads", c.threads, "worker threads (0: all cores, capped by SEMBURN_THREADS)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semburn: Bayesian structural equation models by MCMC over the marginal likelihood"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  FitOptions fit;
  auto* fit_cmd = app.add_subcommand("fit", "sample the posterior and write summaries, draws and diagnostics");
  add_common(fit_cmd, fit.common, true);
  add_sampler(fit_cmd, fit.sampler, fit.mode);
  fit_cmd->add_flag("--latent-scores", fit.latent_scores, "also write posterior latent score summaries");
  fit_cmd->add_option("--rhat-threshold", fit.rhat_threshold, "convergence threshold for the exit code");

  MlCommandOptions ml;
  auto* ml_cmd = app.add_subcommand("ml", "maximum likelihood estimates with standard errors");
  add_common(ml_cmd, ml.common, true);
  ml_cmd->add_option("--restarts", ml.restarts, "number of optimiser starts");
  ml_cmd->add_option("--seed", ml.seed, "seed for restart jitter");
  ml_cmd->add_option("--compare", ml.compare, "summary.csv of a fit to compare against");

  SbcCommandOptions sbc;
  auto* sbc_cmd = app.add_subcommand("sbc", "simulation-based calibration from the prior");
  add_common(sbc_cmd, sbc.common, false);
  add_sampler(sbc_cmd, sbc.sbc.sampler, sbc.mode);
  sbc_cmd->add_option("--reps", sbc.sbc.replications, "number of replications");
  sbc_cmd->add_option("--n", sbc.sbc.n_per_dataset, "rows per simulated dataset");
  sbc_cmd->add_option("--draws", sbc.sbc.posterior_draws, "retained posterior draws per replication");
  sbc_cmd->add_option("--thinning", sbc.sbc.thinning, "fixed thinning (0: spread draws evenly)");
  sbc_cmd->add_option("--bins", sbc.sbc.bins, "rank histogram bins");
  sbc_cmd->add_flag("--ranks-csv", sbc.ranks_csv, "also write raw ranks as CSV");
  sbc_cmd->callback([&] { sbc.sbc.seed = sbc.sbc.sampler.seed; });

  LoglikOptions ll;
  auto* ll_cmd = app.add_subcommand("loglik", "evaluate the marginal log-likelihood at given parameter values");
  add_common(ll_cmd, ll.common, true);
  ll_cmd->add_option("theta", ll.theta_path, "CSV with param and value columns")->required();

  SimulateOptions sim;
  auto* sim_cmd = app.add_subcommand("simulate", "draw a dataset from the model at given parameter values");
  sim_cmd->add_option("model", sim.model_path, "model file")->required();
  sim_cmd->add_option("--truth", sim.truth_path, "CSV with param and value columns")->required();
  sim_cmd->add_option("--n", sim.n, "number of rows");
  sim_cmd->add_option("--seed", sim.seed, "random seed");
  sim_cmd->add_option("--out", sim.out_path, "output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*fit_cmd) return cmd_fit(fit);
    if (*ml_cmd) return cmd_ml(ml);
    if (*sbc_cmd) return cmd_sbc(sbc);
    if (*ll_cmd) return cmd_loglik(ll);
    if (*sim_cmd) return cmd_simulate(sim);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kModel;
  } catch (const InitializationError& e) {
    std::cerr << "initialization failed: " << e.what() << "\n";
    return kModel;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kModel;
  }
  return kUsage;
}
