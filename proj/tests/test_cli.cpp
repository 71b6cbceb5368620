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


#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the semburn executable with `args`, capturing stdout and stderr.
Run run_cli(const std::string& args) {
  const std::string cmd = std::string(SEMBURN_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.out += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("semburn_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string src(const std::string& rel) { return (semburn::testing::source_dir() / rel).string(); }

int csv_records(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') ++n;
  return n - 1;  // header
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("fit writes the artifact set for Holzinger-Swineford") {
  const fs::path out = scratch("fit_hs");
  const Run r = run_cli("fit " + src("models/holzinger_swineford.lav") + " " + src("data/holzinger_swineford.csv") +
                        " --chains 2 --warmup 150 --samples 100 --seed 1 --latent-scores --out " + out.string());
  CHECK((r.code == 0 || r.code == 3));
  CHECK(csv_records(out / "summary.csv") == 30);
  CHECK(csv_records(out / "draws.csv") == 2 * 100 * 30);
  CHECK(csv_records(out / "latent_scores.csv") == 301 * 3);
  std::ifstream dj(out / "diagnostics.json");
  const auto j = nlohmann::json::parse(dj);
  CHECK(j["parameters"].size() == 30);
  CHECK(j["chains"].size() == 2);
  const std::string hash = j["manifest_hash"];
  std::ifstream draws(out / "draws.csv");
  std::string first, second;
  std::getline(draws, first);
  std::getline(draws, second);
  CHECK(first.find(hash) != std::string::npos);
  CHECK(second == "chain,iter,param,value");
}

TEST_CASE("conditional fit produces the same artifact set") {
  const fs::path out = scratch("fit_pd_cond");
  const Run r = run_cli("fit " + src("models/political_democracy.lav") + " " + src("data/political_democracy.csv") +
                        " --mode conditional --chains 1 --warmup 100 --samples 20 --out " + out.string());
  CHECK((r.code == 0 || r.code == 3));
  CHECK(csv_records(out / "summary.csv") == 42);
  CHECK(fs::exists(out / "draws.csv"));
  CHECK(fs::exists(out / "diagnostics.json"));
}

TEST_CASE("usage and input errors map to their exit codes") {
  const Run missing = run_cli("fit " + src("models/political_democracy.lav") + " /no/such/file.csv");
  CHECK(missing.code == 1);
  CHECK(missing.out.find("/no/such/file.csv") != std::string::npos);
  CHECK(run_cli("").code == 1);
  CHECK(run_cli("fit --chains 2").code == 1);

  const fs::path dir = scratch("errors");
  write(dir / "bad.lav", "f =~ y1 +\n");
  const Run parse = run_cli("fit " + (dir / "bad.lav").string() + " " + src("data/political_democracy.csv"));
  CHECK(parse.code == 2);
  CHECK(parse.out.find("line 1") != std::string::npos);

  write(dir / "unknown.lav", "f =~ nosuch1 + nosuch2\n");
  CHECK(run_cli("fit " + (dir / "unknown.lav").string() + " " + src("data/political_democracy.csv")).code == 2);
}

TEST_CASE("loglik agrees across moment paths and names rejections") {
  const fs::path dir = scratch("loglik");
  const std::string pd = src("models/political_democracy.lav") + " " + src("data/political_democracy.csv");
  const Run ml = run_cli("ml " + pd + " --out " + dir.string());
  REQUIRE(ml.code == 0);
  const Run fast = run_cli("loglik " + pd + " " + (dir / "ml.csv").string());
  const Run dense = run_cli("loglik " + pd + " " + (dir / "ml.csv").string() + " --no-simplify");
  REQUIRE(fast.code == 0);
  REQUIRE(dense.code == 0);
  auto logp = [](const std::string& s) {
    const auto at = s.find("\nlogp ");
    REQUIRE(at != std::string::npos);
    return std::stod(s.substr(at + 6));
  };
  CHECK(std::abs(logp(fast.out) - logp(dense.out)) <= 1e-10 * std::abs(logp(dense.out)));
  CHECK(fast.out.find("simplification: recursive B") != std::string::npos);
  CHECK(dense.out.find("simplification: none") != std::string::npos);

  // feedback loop with unit coefficients: I - B is singular
  write(dir / "loop.lav", "f1 =~ 1*y1 + y2\nf2 =~ 1*y3 + y4\nf1 ~ f2\nf2 ~ f1\n");
  write(dir / "loop.csv", "y1,y2,y3,y4\n1,2,3,4\n2,1,0,1\n0,1,1,2\n");
  write(dir / "loop_theta.csv",
        "param,value\nf1 =~ y2,1\nf2 =~ y4,1\nf1 ~ f2,1\nf2 ~ f1,1\ny1 ~~ y1,1\ny2 ~~ y2,1\ny3 ~~ y3,1\n"
        "y4 ~~ y4,1\nf1 ~~ f1,1\nf2 ~~ f2,1\ny1 ~ 1,0\ny2 ~ 1,0\ny3 ~ 1,0\ny4 ~ 1,0\n");
  const Run loop = run_cli("loglik " + (dir / "loop.lav").string() + " " + (dir / "loop.csv").string() + " " +
                           (dir / "loop_theta.csv").string());
  CHECK(loop.code == 0);
  CHECK(loop.out.find("REJECT: I-B singular") != std::string::npos);
}

TEST_CASE("ml on a saturated univariate model returns the sample mean and variance") {
  const fs::path dir = scratch("ml_uni");
  write(dir / "uni.lav", "y ~~ y\ny ~ 1\n");
  write(dir / "uni.csv", "y\n1\n2\n4\n7\n");
  const Run r = run_cli("ml " + (dir / "uni.lav").string() + " " + (dir / "uni.csv").string() + " --out " +
                        dir.string());
  REQUIRE(r.code == 0);
  std::ifstream in(dir / "ml.csv");
  std::string line;
  double mean = 0.0, sd = 0.0;
  while (std::getline(in, line)) {
    if (line.rfind("y ~ 1,", 0) == 0) mean = std::stod(line.substr(line.find(',', 6) + 1));
    if (line.rfind("y ~~ y,", 0) == 0) sd = std::stod(line.substr(line.find(',', 7) + 1));
  }
  // MLE variance divides by n
  CHECK(mean == doctest::Approx(3.5).epsilon(1e-6));
  CHECK(sd * sd == doctest::Approx(5.25).epsilon(1e-6));
}

TEST_CASE("ml restarts agree and compare reports per-class differences") {
  const fs::path dir = scratch("ml_compare");
  const std::string pd = src("models/political_democracy.lav") + " " + src("data/political_democracy.csv");
  REQUIRE(run_cli("fit " + pd + " --chains 2 --warmup 200 --samples 200 --out " + dir.string()).code == 0);
  const Run r = run_cli("ml " + pd + " --restarts 5 --compare " + (dir / "summary.csv").string() + " --out " +
                        dir.string());
  REQUIRE(r.code == 0);
  const auto at = r.out.find("across converged restarts ");
  REQUIRE(at != std::string::npos);
  CHECK(std::stod(r.out.substr(at + 26)) < 1e-3);
  CHECK(csv_records(dir / "compare.csv") == 6);
}

TEST_CASE("sbc with one replication writes a valid report") {
  const fs::path dir = scratch("sbc_one");
  const Run r = run_cli("sbc " + src("models/holzinger_swineford.lav") +
                        " --priors set2 --reps 1 --chains 2 --warmup 100 --samples 100 --ranks-csv --out " +
                        dir.string());
  REQUIRE(r.code == 0);
  std::ifstream in(dir / "sbc_report.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["replications"] == 1);
  CHECK(j["parameters"].size() == 30);
  CHECK(fs::exists(dir / "sbc_ranks.csv"));
}

TEST_CASE("simulate writes the requested number of rows") {
  const fs::path dir = scratch("simulate");
  const Run r = run_cli("simulate " + src("models/milcs.lav") + " --truth " + src("models/milcs_truth.csv") +
                        " --n 25 --seed 3 --out " + (dir / "sim.csv").string());
  REQUIRE(r.code == 0);
  CHECK(csv_records(dir / "sim.csv") == 25);
}
