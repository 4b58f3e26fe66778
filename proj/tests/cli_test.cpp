// Copyright 2026 The freerea Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "freerea/cli.hpp"

namespace freerea {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun Cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

int CountLines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "freerea_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "small.toml") << "input = [3, 8, 8]\ncells = [1]\nchannels = [8, 16]\nnum_classes = 10\n";
    const CliRun r = Cli({"enumerate", "--synthetic-table", (dir_ / "table.csv").string(), "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string P(const std::string& name) { return (dir_ / name).string(); }

  inline static fs::path dir_;
};

TEST_F(CliTest, VersionHelpAndUsageErrors) {
  const CliRun v = Cli({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(kVersion), std::string::npos);
  EXPECT_EQ(Cli({"search", "--help"}).code, 0);
  EXPECT_EQ(Cli({}).code, 1);
  EXPECT_EQ(Cli({"search", "--bogus"}).code, 1);
  EXPECT_EQ(Cli({"search", "--space", "darts"}).code, 1);
  EXPECT_EQ(Cli({"score"}).code, 1);
}

TEST_F(CliTest, ConfigErrorsExitOne) {
  EXPECT_EQ(Cli({"cost", "nats:(conv3x3|bogus|zero|zero|zero|zero)"}).code, 1);
  EXPECT_EQ(Cli({"search", "--tabular", P("missing.csv"), "--max-iters", "1"}).code, 1);
  EXPECT_EQ(Cli({"search", "--fitness", "tabular", "--max-iters", "1"}).code, 1);
  EXPECT_EQ(Cli({"search", "--tournament", "1", "--max-iters", "1", "--seed", "1"}).code, 1);
  EXPECT_EQ(Cli({"search", "--constraints", "abc", "--max-iters", "1", "--seed", "1"}).code, 1);
  EXPECT_EQ(Cli({"cost", "--skeleton", P("nope.toml"), "nats:(zero|zero|zero|zero|zero|zero)"}).code, 1);
  const CliRun r = Cli({"correlate", "--seed", "1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST_F(CliTest, RuntimeErrorsExitTwo) {
  const CliRun r = Cli({"search", "--fitness", "tabular", "--tabular", P("table.csv"), "--constraints", "1,1",
                     "--max-iters", "1", "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("InfeasibleSpace"), std::string::npos);
}

TEST_F(CliTest, BinaryReportsExitCodes) {
  const std::string bin = FREEREA_CLI_PATH;
  int status = std::system((bin + " cost 'nats:(zero|zero|zero|zero|zero|zero)' > /dev/null").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 0);
  status = std::system((bin + " cost 'nats:(nope)' > /dev/null 2>&1").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 1);
}

TEST_F(CliTest, CostMatchesLibrary) {
  const std::string g = "nats:(conv3x3|conv3x3|conv3x3|conv3x3|conv3x3|conv3x3)";
  const CliRun r = Cli({"cost", g});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const auto c = compute_cost(Genotype::parse(g), MacroSkeleton::desk());
  EXPECT_EQ(j["params"].get<std::int64_t>(), c.params);
  EXPECT_EQ(j["flops"].get<std::int64_t>(), c.flops);
}

TEST_F(CliTest, ScoreIsDeterministicAndConsistentWithCost) {
  const std::string g = "nats:(conv3x3|skip|conv1x1|avgpool3x3|conv3x3|zero)";
  const std::vector<std::string> args{"score", "--skeleton", P("small.toml"), "--repeats", "2", "--seed", "11", g};
  const CliRun a = Cli(args), b = Cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  const auto j = nlohmann::json::parse(a.out);
  EXPECT_EQ(j["metrics"]["repeats"].size(), 2u);
  const auto c = nlohmann::json::parse(Cli({"cost", "--skeleton", P("small.toml"), g}).out);
  EXPECT_EQ(j["params"], c["params"]);
  EXPECT_EQ(j["flops"], c["flops"]);
}

TEST_F(CliTest, ScoreOfEmptyCell) {
  const CliRun r = Cli({"score", "--skeleton", P("small.toml"), "--repeats", "1", "--seed", "1",
                     "nats:(zero|zero|zero|zero|zero|zero)"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["metrics"]["mean"]["skip_score"].get<double>(), 0.0);
  EXPECT_EQ(j["metrics"]["mean"]["linear_regions"], "-inf");
}

TEST_F(CliTest, SeedFallsBackToEnvironment) {
  const std::string g = "nats:(conv3x3|skip|conv1x1|avgpool3x3|conv3x3|zero)";
  const CliRun flag = Cli({"score", "--skeleton", P("small.toml"), "--repeats", "1", "--seed", "42", g});
  setenv("FREEREA_SEED", "42", 1);
  const CliRun env = Cli({"score", "--skeleton", P("small.toml"), "--repeats", "1", g});
  setenv("FREEREA_SEED", "x", 1);
  const CliRun bad = Cli({"score", "--skeleton", P("small.toml"), "--repeats", "1", g});
  unsetenv("FREEREA_SEED");
  EXPECT_EQ(flag.out, env.out);
  EXPECT_EQ(bad.code, 1);
  const CliRun fresh = Cli({"score", "--skeleton", P("small.toml"), "--repeats", "1", "--out", P("fresh"), g});
  ASSERT_EQ(fresh.code, 0);
  const auto m = nlohmann::json::parse(Slurp(P("fresh/manifest.json")));
  EXPECT_EQ(nlohmann::json::parse(Slurp(P("fresh/score.json")))["seed"], m["seed"]);
}

TEST_F(CliTest, ProxySearchIsDeterministic) {
  const std::vector<std::string> args{"search", "--skeleton", P("small.toml"), "--repeats", "1",
                                      "--population", "4", "--tournament", "2", "--max-iters", "3", "--seed", "5"};
  const CliRun a = Cli(args), b = Cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  const auto j = nlohmann::json::parse(a.out);
  EXPECT_EQ(j["steps"], 3);
  EXPECT_EQ(j["config"]["time_budget"], 0.0);
  EXPECT_EQ(j["history"].size(), 4u);
}

TEST_F(CliTest, TabularSearchWritesReproducibleFiles) {
  const std::vector<std::string> base{"search", "--fitness", "tabular", "--tabular", P("table.csv"),
                                      "--max-iters", "30", "--runs", "3", "--seed", "7", "--plot"};
  auto with_out = [&](const std::string& d) {
    auto a = base;
    a.insert(a.end(), {"--out", P(d)});
    return a;
  };
  ASSERT_EQ(Cli(with_out("s1")).code, 0);
  ASSERT_EQ(Cli(with_out("s2")).code, 0);
  for (const char* f : {"run_000.json", "run_001.json", "run_002.json", "aggregate.csv", "summary.csv", "trajectory.svg",
                        "resolved.conf"})
    EXPECT_EQ(Slurp(P("s1") + "/" + f), Slurp(P("s2") + "/" + f)) << f;
  EXPECT_EQ(CountLines(Slurp(P("s1/aggregate.csv"))), 4);
  const auto m = nlohmann::json::parse(Slurp(P("s1/manifest.json")));
  EXPECT_EQ(m["seed"], 7);
  EXPECT_EQ(m["outputs"].size(), 6u);
  EXPECT_EQ(m["wall_time_seconds"].size(), 3u);

  // Rerunning from the recorded configuration reproduces every result file.
  const CliRun again = Cli({"search", "--config", P("s1/resolved.conf"), "--out", P("s3")});
  ASSERT_EQ(again.code, 0) << again.err;
  for (const char* f : {"run_000.json", "aggregate.csv", "summary.csv", "trajectory.svg"})
    EXPECT_EQ(Slurp(P("s1") + "/" + f), Slurp(P("s3") + "/" + f)) << f;

  const auto summary = Slurp(P("s1/summary.csv"));
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "runs,mean_fitness,std_fitness,mean_accuracy,std_accuracy,optimum,regret");
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  std::ofstream(P("cfg.toml")) << "population = 6\ntournament = 3\nmax-iters = 2\nfitness = \"tabular\"\ntabular = \""
                               << P("table.csv") << "\"\n";
  ASSERT_EQ(Cli({"search", "--config", P("cfg.toml"), "--tournament", "2", "--seed", "1", "--out", P("cfg")}).code, 0);
  const auto conf = Slurp(P("cfg/resolved.conf"));
  EXPECT_NE(conf.find("population = 6\n"), std::string::npos);
  EXPECT_NE(conf.find("tournament = 2\n"), std::string::npos);
  EXPECT_NE(conf.find("max-iters = 2\n"), std::string::npos);
  EXPECT_NE(conf.find("time = 0\n"), std::string::npos);
  EXPECT_EQ(conf.find("out = "), std::string::npos);

  std::ofstream(P("typo.toml")) << "populaton = 6\n";
  EXPECT_EQ(Cli({"search", "--config", P("typo.toml")}).code, 1);
}

TEST_F(CliTest, ExplicitTimeKeepsTheBudget) {
  const CliRun r = Cli({"search", "--fitness", "tabular", "--tabular", P("table.csv"), "--max-iters", "5", "--time",
                     "30", "--seed", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["config"]["time_budget"], 30.0);
}

TEST_F(CliTest, AblationShapes) {
  const CliRun fit = Cli({"ablate", "--mode", "fitness", "--skeleton", P("small.toml"), "--repeats", "1",
                       "--population", "4", "--tournament", "2", "--max-iters", "1", "--seed", "3"});
  ASSERT_EQ(fit.code, 0) << fit.err;
  EXPECT_EQ(CountLines(fit.out), 5);
  EXPECT_NE(fit.out.find("\nno_skip,"), std::string::npos);

  const CliRun nn = Cli({"ablate", "--mode", "nn", "--fitness", "tabular", "--tabular", P("table.csv"),
                      "--max-evals", "150", "--runs", "2", "--seed", "3"});
  ASSERT_EQ(nn.code, 0) << nn.err;
  EXPECT_EQ(CountLines(nn.out), 7);
  for (const char* label : {"\"25,5\"", "\"100,2\"", "\"100,50\"", "\"20,20\"", "\"100,25\"", "\"64,16\""})
    EXPECT_NE(nn.out.find(std::string("\n") + label + ","), std::string::npos) << label;
  EXPECT_EQ(Cli({"ablate", "--mode", "fitness", "--fitness", "tabular", "--tabular", P("table.csv"),
                 "--max-iters", "1", "--seed", "1"}).code,
            1);
}

TEST_F(CliTest, CorrelateAndEnumerate) {
  std::ofstream(P("few.csv")) << "genotype,test_accuracy\n"
                              << "nats:(conv3x3|conv3x3|conv3x3|conv3x3|conv3x3|conv3x3),90\n"
                              << "nats:(conv1x1|skip|conv3x3|avgpool3x3|conv3x3|zero),70\n"
                              << "nats:(skip|conv1x1|avgpool3x3|zero|conv3x3|skip),60\n"
                              << "nats:(avgpool3x3|zero|skip|conv1x1|conv1x1|conv3x3),50\n";
  const CliRun c = Cli({"correlate", "--tabular", P("few.csv"), "--skeleton", P("small.toml"), "--repeats", "1",
                     "--seed", "4"});
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(CountLines(c.out), 5);
  EXPECT_EQ(c.out.substr(0, c.out.find('\n')), "metric,kendall_tau,spearman_rho,error");

  const CliRun e = Cli({"enumerate", "--seed", "1"});
  ASSERT_EQ(e.code, 0);
  EXPECT_EQ(CountLines(e.out), 15625);
  EXPECT_EQ(Cli({"enumerate", "--space", "nb101", "--seed", "1"}).code, 1);
  EXPECT_EQ(load_tabular(P("table.csv")), synthetic_nats_table(3));
}

}  // namespace
}  // namespace freerea
