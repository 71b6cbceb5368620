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


#include "commands.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "semburn/data.hpp"
#include "semburn/errors.hpp"
#include "semburn/likelihood.hpp"
#include "semburn/model.hpp"
#include "semburn/posterior.hpp"
#include "semburn/version.hpp"

namespace semburn::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

fs::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
  return fs::path(dir);
}

std::string num(double v, int digits = 17) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// RFC 4180 field quoting
std::string field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_header(const std::string& path) {
  const std::string text = read_file(path);
  const auto end = text.find_first_of("\r\n");
  return split_csv_record(std::string_view(text).substr(0, end));
}

struct Loaded {
  CompiledModel model;
  std::string model_text;
  std::optional<Dataset> data;
};

Loaded load_model(const std::string& model_path, const std::string& data_path) {
  Loaded l;
  l.model_text = read_file(model_path);
  if (!data_path.empty()) {
    const auto header = csv_header(data_path);
    l.model = compile_model(l.model_text, header);
    l.data = load_csv(data_path, l.model.templates.observed);
  } else {
    const auto lines = parse_model(l.model_text);
    const auto names = referenced_observed(lines);
    l.model = compile_model(l.model_text, names);
  }
  return l;
}

PriorSet make_priors(const CommonOptions& o, const MatrixTemplates& t) {
  PriorSet ps;
  if (o.priors == "set1") {
    ps = default_priors(t);
  } else if (o.priors == "set2") {
    ps = informative_priors(t);
  } else {
    ps = default_priors(t);
    apply_prior_overrides(ps, t, read_file(o.priors));
  }
  if (o.scale_param == "sd") ps.scale = ScaleParam::Sd;
  else if (o.scale_param == "var") ps.scale = ScaleParam::Variance;
  else if (o.scale_param == "prec") ps.scale = ScaleParam::Precision;
  else throw std::invalid_argument("unknown --scale-param " + o.scale_param);
  return ps;
}

DensityMode parse_mode(const std::string& mode) {
  if (mode == "marginal") return DensityMode::Marginal;
  if (mode == "conditional") return DensityMode::Conditional;
  throw std::invalid_argument("unknown --mode " + mode);
}

ordered_json common_manifest(const std::string& command, const CommonOptions& o, const Loaded& l) {
  ordered_json m;
  m["command"] = command;
  m["engine_version"] = kVersion;
  m["model"] = o.model_path;
  m["model_fnv1a"] = fnv1a_hex(l.model_text);
  m["data"] = o.data_path;
  if (!o.data_path.empty()) m["data_fnv1a"] = fnv1a_hex(read_file(o.data_path));
  m["priors"] = o.priors;
  if (o.priors != "set1" && o.priors != "set2") m["priors_fnv1a"] = fnv1a_hex(read_file(o.priors));
  m["scale_param"] = o.scale_param;
  m["no_simplify"] = o.no_simplify;
  return m;
}

ordered_json sampler_json(const SamplerConfig& c, const std::string& mode) {
  ordered_json s;
  s["chains"] = c.chains;
  s["warmup"] = c.warmup;
  s["samples"] = c.samples;
  s["seed"] = c.seed;
  s["mode"] = mode;
  s["max_treedepth"] = c.max_treedepth;
  s["target_accept"] = c.target_accept;
  return s;
}

std::string comment_line(const std::string& hash) { return "# semburn " + std::string(kVersion) + " manifest " + hash + "\n"; }

// Reads `param` plus `value` (or `estimate`) columns; `#` lines are skipped.
std::map<std::string, double> read_named_values(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<std::string> header;
  int name_col = -1, value_col = -1;
  std::map<std::string, double> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto rec = split_csv_record(line);
    if (header.empty()) {
      header = rec;
      for (int i = 0; i < static_cast<int>(rec.size()); ++i) {
        if (rec[i] == "param") name_col = i;
        if (value_col < 0 && (rec[i] == "value" || rec[i] == "estimate" || rec[i] == "mean")) value_col = i;
      }
      if (name_col < 0 || value_col < 0)
        throw DataError(path + ": expected a 'param' column and a 'value', 'estimate' or 'mean' column");
      continue;
    }
    if (static_cast<int>(rec.size()) <= std::max(name_col, value_col)) throw DataError(path + ": short record");
    try {
      out[rec[name_col]] = std::stod(rec[value_col]);
    } catch (const std::exception&) {
      throw DataError(path + ": value for '" + rec[name_col] + "' is not a number");
    }
  }
  return out;
}

Eigen::VectorXd named_to_vector(const std::map<std::string, double>& named, const MatrixTemplates& t,
                                const std::string& path) {
  Eigen::VectorXd x(t.free_count());
  std::string missing;
  for (int k = 0; k < t.free_count(); ++k) {
    const auto it = named.find(t.params[k].name);
    if (it == named.end()) missing += (missing.empty() ? "" : ", ") + t.params[k].name;
    else x(k) = it->second;
  }
  if (!missing.empty()) throw DataError(path + ": missing values for " + missing);
  for (const auto& [name, v] : named) {
    bool known = false;
    for (const auto& p : t.params) known = known || p.name == name;
    if (!known) throw DataError(path + ": unknown parameter '" + name + "'");
  }
  return x;
}

std::string mask_string(const PatternGroup& g, int p) {
  std::string s(p, '0');
  for (int j : g.observed_idx) s[j] = '1';
  return s;
}

}  // namespace

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

int cmd_fit(const FitOptions& o) {
  const Loaded l = load_model(o.common.model_path, o.common.data_path);
  const auto& t = l.model.templates;
  const PriorSet ps = make_priors(o.common, t);
  SamplerConfig cfg = o.sampler;
  cfg.mode = parse_mode(o.mode);
  cfg.validate();

  ordered_json manifest = common_manifest("fit", o.common, l);
  manifest["sampler"] = sampler_json(cfg, o.mode);
  manifest["latent_scores"] = o.latent_scores;
  manifest["rhat_threshold"] = o.rhat_threshold;
  const std::string hash = fnv1a_hex(manifest.dump());
  const fs::path out = prepare_out_dir(o.common.out_dir);

  const SemDensity density(t, l.model.flags, *l.data, ps,
                           SemDensity::Options{.mode = cfg.mode,
                                               .include_prior = true,
                                               .path = o.common.no_simplify ? MomentsPath::General
                                                                            : MomentsPath::Simplified});
  std::cerr << "sampling " << cfg.chains << " chains, " << density.dim() << " unconstrained dimensions\n";
  const DrawsMatrix draws = sign_correct(run_chains(density, cfg), build_sign_rule(t));
  const SummaryTable table = summarize(draws);

  std::ostringstream sum;
  sum << comment_line(hash) << "param,class,mean,sd,q5,q50,q95,rhat,ess_bulk,ess_per_s,mcse_mean\n";
  for (int k = 0; k < static_cast<int>(table.rows.size()); ++k) {
    const auto& r = table.rows[k];
    sum << field(r.name) << ',' << class_name(t.params[k].cls) << ',' << num(r.mean, 10) << ',' << num(r.sd, 10)
        << ',' << num(r.q5, 10) << ',' << num(r.q50, 10) << ',' << num(r.q95, 10) << ',' << num(r.rhat, 8) << ','
        << num(r.ess_bulk, 8) << ',' << num(r.ess_per_second, 8) << ',' << num(r.mcse_mean, 8) << '\n';
  }
  write_file(out / "summary.csv", sum.str());

  std::ostringstream dr;
  dr << comment_line(hash) << "chain,iter,param,value\n";
  std::vector<std::string> quoted;
  for (const auto& n : draws.names) quoted.push_back(field(n));
  for (int c = 0; c < draws.num_chains(); ++c)
    for (int i = 0; i < draws.num_samples(); ++i)
      for (int k = 0; k < draws.num_params(); ++k)
        dr << c + 1 << ',' << i + 1 << ',' << quoted[k] << ',' << num(draws.chains[c](i, k)) << '\n';
  write_file(out / "draws.csv", dr.str());

  bool converged = true;
  ordered_json diag;
  diag["manifest_hash"] = hash;
  diag["manifest"] = manifest;
  ordered_json params = ordered_json::array();
  for (const auto& r : table.rows) {
    ordered_json e;
    e["name"] = r.name;
    e["rhat"] = std::isfinite(r.rhat) ? ordered_json(r.rhat) : ordered_json();
    e["ess_bulk"] = std::isfinite(r.ess_bulk) ? ordered_json(r.ess_bulk) : ordered_json();
    e["ess_per_s"] = std::isfinite(r.ess_per_second) ? ordered_json(r.ess_per_second) : ordered_json();
    e["degenerate"] = r.degenerate;
    params.push_back(std::move(e));
    if (!r.degenerate && !(r.rhat < o.rhat_threshold)) converged = false;
  }
  diag["parameters"] = std::move(params);
  diag["max_rhat"] = table.max_rhat();
  diag["divergences"] = table.divergences;
  diag["draws"] = table.draws;
  diag["sampling_seconds"] = table.seconds;
  ordered_json chains = ordered_json::array();
  for (int c = 0; c < draws.num_chains(); ++c) {
    int div = 0;
    for (auto d : draws.divergent[c]) div += d;
    chains.push_back({{"chain", c + 1},
                      {"divergences", div},
                      {"step_size", draws.step_size[c]},
                      {"mean_accept", draws.mean_accept[c]},
                      {"max_treedepth_hits", draws.max_depth_hits[c]},
                      {"warmup_seconds", draws.warmup_seconds[c]},
                      {"sampling_seconds", draws.seconds[c]}});
  }
  diag["chains"] = std::move(chains);
  diag["converged"] = converged;
  write_file(out / "diagnostics.json", diag.dump(2) + "\n");

  if (o.latent_scores) {
    // at most about 1000 parameter draws feed the score summaries
    const int total = draws.num_chains() * draws.num_samples();
    const int stride = std::max(1, total / 1000);
    std::mt19937_64 rng = chain_rng(cfg.seed, -1);
    const auto scores = latent_scores(draws, t, l.model.flags, *l.data, rng, stride);
    const int n = l.data->n();
    Eigen::MatrixXd sum1 = Eigen::MatrixXd::Zero(n, t.m), sum2 = Eigen::MatrixXd::Zero(n, t.m);
    for (const auto& s : scores) {
      sum1 += s;
      sum2 += s.cwiseProduct(s);
    }
    const double count = static_cast<double>(scores.size());
    std::ostringstream ls;
    ls << comment_line(hash) << "row,latent,mean,sd\n";
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < t.m; ++j) {
        const double mean = sum1(i, j) / count;
        const double var = count > 1 ? std::max(0.0, (sum2(i, j) - count * mean * mean) / (count - 1)) : 0.0;
        ls << i + 1 << ',' << field(t.latent[j]) << ',' << num(mean, 10) << ',' << num(std::sqrt(var), 10) << '\n';
      }
    write_file(out / "latent_scores.csv", ls.str());
  }

  std::cout << "parameters " << table.rows.size() << ", draws " << table.draws << ", divergences "
            << table.divergences << ", max Rhat " << num(table.max_rhat(), 4) << ", sampling "
            << num(table.seconds, 4) << " s\n";
  for (const auto& r : table.rows)
    std::printf("  %-28s mean %10.4f  sd %8.4f  rhat %6.3f  ess %7.1f\n", r.name.c_str(), r.mean, r.sd, r.rhat,
                r.ess_bulk);
  if (!converged) {
    std::cerr << "warning: Rhat above " << o.rhat_threshold << " for at least one parameter\n";
    return kConvergence;
  }
  return kOk;
}

int cmd_ml(const MlCommandOptions& o) {
  if (o.restarts < 1) throw std::invalid_argument("--restarts must be positive");
  const Loaded l = load_model(o.common.model_path, o.common.data_path);
  const auto& t = l.model.templates;
  const PriorSet ps = make_priors(o.common, t);
  ordered_json manifest = common_manifest("ml", o.common, l);
  manifest["restarts"] = o.restarts;
  manifest["seed"] = o.seed;
  const std::string hash = fnv1a_hex(manifest.dump());
  const fs::path out = prepare_out_dir(o.common.out_dir);

  const SemDensity density(t, l.model.flags, *l.data, ps,
                           SemDensity::Options{.mode = DensityMode::Marginal,
                                               .include_prior = false,
                                               .path = o.common.no_simplify ? MomentsPath::General
                                                                            : MomentsPath::Simplified});
  std::mt19937_64 rng = chain_rng(o.seed, 0);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  std::vector<MlResult> runs;
  for (int r = 0; r < o.restarts; ++r) {
    Eigen::VectorXd start = density.start_center();
    if (r > 0)
      for (auto& v : start) v += jitter(rng);
    runs.push_back(maximize_marginal_loglik(density, start));
  }
  int best = 0;
  for (int r = 1; r < o.restarts; ++r) {
    const bool better = runs[r].converged > runs[best].converged ||
                        (runs[r].converged == runs[best].converged && runs[r].logp > runs[best].logp);
    if (better) best = r;
  }
  const MlResult& ml = runs[best];
  double spread = 0.0;
  for (const auto& r : runs)
    if (r.converged && ml.converged) spread = std::max(spread, (r.estimate - ml.estimate).cwiseAbs().maxCoeff());

  std::ostringstream os;
  os << comment_line(hash) << "param,class,estimate,se,converged\n";
  for (int k = 0; k < t.free_count(); ++k)
    os << field(t.params[k].name) << ',' << class_name(t.params[k].cls) << ',' << num(ml.estimate(k), 12) << ','
       << num(ml.std_error(k), 10) << ',' << (ml.converged ? "true" : "false") << '\n';
  write_file(out / "ml.csv", os.str());

  std::cout << "logL " << num(ml.logp, 10) << ", converged " << (ml.converged ? "yes" : "no") << ", iterations "
            << ml.iterations << "\n";
  if (o.restarts > 1) std::cout << "max |estimate difference| across converged restarts " << num(spread, 4) << "\n";
  for (int k = 0; k < t.free_count(); ++k)
    std::printf("  %-28s %10.4f  (%.4f)\n", t.params[k].name.c_str(), ml.estimate(k), ml.std_error(k));

  if (!o.compare.empty()) {
    const auto posterior = read_named_values(o.compare);
    std::map<std::string, std::pair<double, std::string>> worst;  // class -> (diff, param)
    for (int k = 0; k < t.free_count(); ++k) {
      const auto it = posterior.find(t.params[k].name);
      if (it == posterior.end()) throw DataError(o.compare + ": no posterior mean for " + t.params[k].name);
      const std::string cls(class_name(t.params[k].cls));
      const double d = std::abs(it->second - ml.estimate(k));
      auto& w = worst[cls];
      if (w.second.empty() || d > w.first) w = {d, t.params[k].name};
    }
    std::ostringstream cs;
    cs << comment_line(hash) << "class,max_abs_diff,param\n";
    std::cout << "max |posterior mean - MLE| by class\n";
    for (const auto& [cls, w] : worst) {
      cs << cls << ',' << num(w.first, 8) << ',' << field(w.second) << '\n';
      std::printf("  %-10s %.4f  (%s)\n", cls.c_str(), w.first, w.second.c_str());
    }
    write_file(out / "compare.csv", cs.str());
  }
  if (!ml.converged) {
    std::cerr << "warning: ML optimisation did not converge\n";
    return kConvergence;
  }
  return kOk;
}

int cmd_sbc(const SbcCommandOptions& o) {
  const Loaded l = load_model(o.common.model_path, "");
  const auto& t = l.model.templates;
  const PriorSet ps = make_priors(o.common, t);
  SbcConfig cfg = o.sbc;
  cfg.sampler.mode = parse_mode(o.mode);
  cfg.validate();
  ordered_json manifest = common_manifest("sbc", o.common, l);
  manifest["sampler"] = sampler_json(cfg.sampler, o.mode);
  manifest["replications"] = cfg.replications;
  manifest["n_per_dataset"] = cfg.n_per_dataset;
  manifest["posterior_draws"] = cfg.posterior_draws;
  manifest["thinning"] = cfg.thinning;
  manifest["bins"] = cfg.bins;
  manifest["seed"] = cfg.seed;
  const std::string hash = fnv1a_hex(manifest.dump());
  const fs::path out = prepare_out_dir(o.common.out_dir);

  cfg.progress = [&](int rep, const std::string& err) {
    std::cerr << "replication " << rep + 1 << "/" << cfg.replications << (err.empty() ? " done" : " failed: " + err)
              << "\n";
  };
  const SbcReport report = run_sbc(t, l.model.flags, ps, cfg);
  ordered_json j = ordered_json::parse(report.to_json());
  ordered_json wrapped;
  wrapped["manifest_hash"] = hash;
  wrapped["manifest"] = manifest;
  for (auto it = j.begin(); it != j.end(); ++it) wrapped[it.key()] = it.value();
  write_file(out / "sbc_report.json", wrapped.dump(2) + "\n");
  if (o.ranks_csv) write_file(out / "sbc_ranks.csv", comment_line(hash) + report.ranks_csv());

  std::cout << "replications " << report.completed << " completed, " << report.failed << " failed; prior draws "
            << report.attempts << " (" << report.redraws << " redrawn)\n";
  std::cout << "param,class,chi_square,p_value,extreme_ratio\n";
  for (const auto& p : report.parameters)
    std::cout << field(p.name) << ',' << p.cls << ',' << num(p.uniformity.chi_square, 6) << ','
              << num(p.uniformity.p_value, 4) << ',' << num(p.extreme_ratio, 4) << '\n';
  return kOk;
}

int cmd_loglik(const LoglikOptions& o) {
  const Loaded l = load_model(o.common.model_path, o.common.data_path);
  const auto& t = l.model.templates;
  const Eigen::VectorXd x = named_to_vector(read_named_values(o.theta_path), t, o.theta_path);
  const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));
  const auto& flags = l.model.flags;
  std::cout << "structure: b_recursive=" << flags.b_recursive << " psi_diagonal=" << flags.psi_diagonal
            << " theta_diagonal=" << flags.theta_diagonal << "\n";
  const auto res =
      implied_moments(sm, flags, o.common.no_simplify ? MomentsPath::General : MomentsPath::Simplified);
  if (const auto* rej = std::get_if<Rejection>(&res)) {
    std::cout << "REJECT: " << rej->reason << "\n";
    return kOk;
  }
  const auto& mom = std::get<ImpliedMoments>(res);
  if (mom.simplifications.empty()) std::cout << "simplification: none\n";
  for (const auto& s : mom.simplifications) std::cout << "simplification: " << s << "\n";
  const auto groups = group_patterns(*l.data);
  const LikelihoodValue v = marginal_loglik(mom, groups);
  if (v.rejected()) {
    std::cout << "REJECT: " << *v.reject << "\n";
    return kOk;
  }
  std::cout << "logp " << num(v.logp) << "\n";
  const auto parts = marginal_loglik_by_group(mom, groups);
  for (std::size_t g = 0; g < groups.size(); ++g)
    std::cout << "pattern " << mask_string(groups[g], t.p) << " rows " << groups[g].count() << " logp "
              << num(parts[g]) << "\n";
  return kOk;
}

int cmd_simulate(const SimulateOptions& o) {
  const Loaded l = load_model(o.model_path, "");
  const auto& t = l.model.templates;
  const Eigen::VectorXd x = named_to_vector(read_named_values(o.truth_path), t, o.truth_path);
  const SemMatrices sm = assemble(t, std::span<const double>(x.data(), x.size()));
  const auto res = implied_moments(sm, l.model.flags);
  if (const auto* rej = std::get_if<Rejection>(&res)) throw ModelError("true values are invalid: " + rej->reason);
  std::seed_seq seq{static_cast<std::uint32_t>(o.seed & 0xffffffffu), static_cast<std::uint32_t>(o.seed >> 32)};
  std::mt19937_64 rng(seq);
  const Dataset d = simulate_dataset(std::get<ImpliedMoments>(res), t.observed, o.n, rng);
  std::ostringstream os;
  for (int j = 0; j < d.p(); ++j) os << (j ? "," : "") << field(d.columns[j]);
  os << "\n";
  for (int i = 0; i < d.n(); ++i) {
    for (int j = 0; j < d.p(); ++j) os << (j ? "," : "") << num(d.values(i, j), 10);
    os << "\n";
  }
  if (o.out_path.empty() || o.out_path == "-") std::cout << os.str();
  else write_file(o.out_path, os.str());
  return kOk;
}

}  // namespace semburn::cli
