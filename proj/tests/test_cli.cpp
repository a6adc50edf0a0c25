#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include "devi/experiment.hpp"

namespace fs = std::filesystem;
namespace ex = devi::experiment;

namespace {

struct CliRun {
  int code = -1;
  std::string output;  // stdout and stderr
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("devi_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_config(const std::string& name, const nlohmann::json& j) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  /// Small but complete configuration.
  static nlohmann::json tiny(const std::string& model = "devi") {
    return {
        {"model", model},
        {"seeds", {1, 2}},
        {"library", {{"classes", 400}, {"seed", 1}}},
        {"schedule",
         {{"burn_in", 100},
          {"minibatch", 20},
          {"minibatches", 12},
          {"store_per_action", 10},
          {"replay_capacity", 300},
          {"eval_every", 4},
          {"eval_episodes", 3}}},
        {"planner", {{"temperature", 0.1}, {"sweeps", 4}}},
        {"transfer", {{"prototypes", {"ring", "tree"}}, {"tasks_per_prototype", 2}, {"episodes", 3}, {"sweeps", 6}}},
        {"gradcheck", {{"coordinates", 60}}},
    };
  }

  CliRun cli(const std::string& args) const {
    const fs::path log = dir_ / "cli.log";
    const std::string cmd = std::string(DEVI_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = slurp(log);
    return r;
  }

  fs::path dir_;
};

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_F(Cli, UnknownKeyIsAConfigErrorNamingTheKey) {
  auto j = tiny();
  j["schedule"]["minibatchs"] = 5;
  const CliRun r = cli("train --config " + write_config("c.json", j).string() + " --out " + (dir_ / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("schedule.minibatchs"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir_ / "o" / "devi_seed1.ckpt"));
}

TEST_F(Cli, InvalidPrototypeIsAConfigErrorNamingTheKey) {
  auto j = tiny();
  j["train_prototypes"] = {"ring", "hexagon"};
  const CliRun r = cli("train --config " + write_config("c.json", j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train_prototypes"), std::string::npos) << r.output;
}

TEST_F(Cli, TypeAndRangeErrorsNameTheKey) {
  auto j = tiny();
  j["planner"]["gamma"] = 1.5;
  CliRun r = cli("train --config " + write_config("a.json", j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("planner.gamma"), std::string::npos) << r.output;
  j = tiny();
  j["seeds"] = nlohmann::json::array();
  r = cli("train --config " + write_config("b.json", j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("seeds"), std::string::npos) << r.output;
  j = tiny();
  j["schedule"]["minibatch"] = -3;
  r = cli("train --config " + write_config("c.json", j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("schedule.minibatch"), std::string::npos) << r.output;
}

TEST_F(Cli, MissingConfigAndUnknownCommandAreConfigErrors) {
  EXPECT_EQ(cli("train --config " + (dir_ / "absent.json").string()).code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  std::ofstream(dir_ / "broken.json") << "{ not json";
  EXPECT_EQ(cli("train --config " + (dir_ / "broken.json").string()).code, 2);
}

TEST_F(Cli, TrainWritesOneCheckpointAndCsvPerSeedWithProvenance) {
  const fs::path out = dir_ / "o";
  const CliRun r = cli("train --config " + write_config("c.json", tiny()).string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  for (int s : {1, 2}) {
    EXPECT_TRUE(fs::exists(out / ("devi_seed" + std::to_string(s) + ".ckpt")));
    const std::string csv = slurp(out / ("devi_seed" + std::to_string(s) + "_metrics.csv"));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), devi::kMetricsHeader);
    EXPECT_EQ(count(csv, "\n"), 13u);  // header plus 12 steps
  }
  const auto prov = nlohmann::json::parse(slurp(out / "provenance_train.json"));
  EXPECT_EQ(prov["seeds"], nlohmann::json({1, 2}));
  EXPECT_EQ(prov["code_version"], ex::kCodeVersion);
  EXPECT_EQ(prov["config"]["planner"]["temperature"], 0.1);
  EXPECT_EQ(prov["config"]["output_dir"], out.string());
}

TEST_F(Cli, RerunsAreBitIdenticalAndParallelismDoesNotChangeOutputs) {
  const fs::path cfg = write_config("c.json", tiny());
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir_ / "b").string()).code, 0);
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir_ / "c").string() + " --parallel 2").code, 0);
  for (const char* f : {"devi_seed1_metrics.csv", "devi_seed2_metrics.csv", "devi_seed1.ckpt", "devi_seed2_detail.csv"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "c" / f)) << f;
  }
}

TEST_F(Cli, SeedOverrideRunsASingleSeed) {
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("train --config " + write_config("c.json", tiny()).string() + " --out " + out.string() +
                " --seed-override 9")
                .code,
            0);
  EXPECT_TRUE(fs::exists(out / "devi_seed9.ckpt"));
  EXPECT_FALSE(fs::exists(out / "devi_seed1.ckpt"));
}

TEST_F(Cli, DqnTrainLogsReturnsEveryEvalInterval) {
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("train --config " + write_config("c.json", tiny("dqn")).string() + " --out " + out.string() +
                " --seed-override 3")
                .code,
            0);
  std::ifstream in(out / "dqn_seed3_metrics.csv");
  const devi::MetricsLog log = devi::read_metrics_csv(in);
  std::vector<std::size_t> evals;
  for (const auto& r : log)
    if (r.oracle_norm) evals.push_back(r.step);
  EXPECT_EQ(evals, (std::vector<std::size_t>{0, 4, 8, 12}));
}

TEST_F(Cli, TransferWritesRowsPerCheckpointAndTaskPlusAggregates) {
  const fs::path cfg = write_config("c.json", tiny());
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + out.string()).code, 0);
  const CliRun r = cli("transfer --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string csv = slurp(out / "transfer.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), ex::kTransferHeader);
  // 2 checkpoints x (2 prototypes x 2 tasks); aggregates for ring, tree, all
  EXPECT_EQ(count(csv, "\neval,"), 8u);
  EXPECT_EQ(count(csv, "\naggregate,"), 3u);
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  while (std::getline(lines, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    ASSERT_EQ(f.size(), 17u) << line;
    EXPECT_EQ(f[2], "devi");
    EXPECT_EQ(f[7], "0") << "held-out split is not in-distribution";
    EXPECT_EQ(f[12], "0") << "no gradient updates";
    if (f[0] == "eval") EXPECT_EQ(f[15], f[16]) << "checkpoint hash unchanged";
  }
  EXPECT_TRUE(fs::exists(out / "provenance_transfer.json"));
}

TEST_F(Cli, TransferOnTrainingGlyphsIsFlaggedInDistribution) {
  auto j = tiny();
  j["seeds"] = {1};
  j["transfer"]["split"] = "train";
  const fs::path cfg = write_config("c.json", j);
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + out.string()).code, 0);
  ASSERT_EQ(cli("transfer --config " + cfg.string() + " --out " + out.string()).code, 0);
  const std::string csv = slurp(out / "transfer.csv");
  EXPECT_EQ(count(csv, ",ring,"), 3u);  // two task rows and one aggregate
  for (const std::regex row : {std::regex("\neval,[^\n]*,ring,[0-9]+,train,1,"), std::regex("\neval,[^\n]*,tree,[0-9]+,train,0,")})
    EXPECT_TRUE(std::regex_search(csv, row));
}

TEST_F(Cli, TransferWithMissingCheckpointFails) {
  const fs::path cfg = write_config("c.json", tiny());
  const CliRun r = cli("transfer --config " + cfg.string() + " --out " + (dir_ / "o").string() + " --checkpoints " +
                    (dir_ / "nothing.ckpt").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("missing checkpoint"), std::string::npos);
}

TEST_F(Cli, TransferAbortsWhenHeldOutClassesLeak) {
  ex::ExperimentConfig cfg = ex::parse_config(tiny());
  cfg.output_dir = (dir_ / "o").string();
  devi::GlyphLibrary lib = devi::make_procedural_library({.classes = 400, .seed = 1});
  lib.train_classes.push_back(lib.test_classes.front());
  std::ostringstream log;
  EXPECT_THROW(ex::cmd_transfer(cfg, std::make_shared<const devi::GlyphLibrary>(lib), {}, 1, log), std::runtime_error);
}

TEST_F(Cli, DqnTransferRelearnRowsRecordUpdates) {
  auto j = tiny("dqn");
  j["seeds"] = {1};
  j["transfer"]["relearn_minibatches"] = 8;
  j["transfer"]["prototypes"] = {"ring"};
  const fs::path cfg = write_config("c.json", j);
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + out.string()).code, 0);
  ASSERT_EQ(cli("transfer --config " + cfg.string() + " --out " + out.string()).code, 0);
  const std::string csv = slurp(out / "transfer.csv");
  EXPECT_EQ(count(csv, "\neval,dqn_seed1.ckpt,dqn,frozen,"), 2u);
  EXPECT_EQ(count(csv, "\neval,dqn_seed1.ckpt,dqn,relearn,"), 2u);
  EXPECT_TRUE(std::regex_search(csv, std::regex("\neval,[^,]*,dqn,frozen,([^,]*,){8}0,")));
  EXPECT_TRUE(std::regex_search(csv, std::regex("\neval,[^,]*,dqn,relearn,([^,]*,){8}8,")));
}

TEST_F(Cli, OracleDumpWritesOneQTablePerTransferTask) {
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("oracle-dump --config " + write_config("c.json", tiny()).string() + " --out " + out.string()).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out / "oracle")) {
    ++files;
    const std::string csv = slurp(e.path());
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "state,action,q_star");
  }
  EXPECT_EQ(files, 4u);
}

TEST_F(Cli, GradcheckPassesAndReportsTheWorstCoordinate) {
  const fs::path out = dir_ / "o";
  const CliRun r = cli("gradcheck --config " + write_config("c.json", tiny()).string() + " --out " + out.string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("devi PASS"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("dqn PASS"), std::string::npos) << r.output;
  EXPECT_TRUE(std::regex_search(r.output, std::regex("worst [a-z0-9_.]+\\[[0-9]+\\] rel_err [0-9.e+-]+")));
  EXPECT_EQ(slurp(out / "gradcheck.txt"), r.output);
}

TEST_F(Cli, GradcheckFailsOnACorruptedBackwardRule) {
  const CliRun r = cli("gradcheck --config " + write_config("c.json", tiny()).string() + " --out " +
                    (dir_ / "o").string() + " --inject-fault relu_backward_halved");
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("devi FAIL"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("dqn FAIL"), std::string::npos) << r.output;
}

TEST_F(Cli, PlotDrawsThinRunsAndABoldMeanPerPanel) {
  const fs::path cfg = write_config("c.json", tiny("dqn"));
  const fs::path out = dir_ / "o";
  ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + out.string()).code, 0);
  const std::string inputs = (out / "dqn_seed1_metrics.csv").string() + " " + (out / "dqn_seed2_metrics.csv").string();
  ASSERT_EQ(cli("plot --metrics " + inputs + " --out " + (dir_ / "a.svg").string()).code, 0);
  ASSERT_EQ(cli("plot --metrics " + inputs + " --out " + (dir_ / "b.svg").string()).code, 0);
  const std::string svg = slurp(dir_ / "a.svg");
  EXPECT_EQ(svg, slurp(dir_ / "b.svg"));
  EXPECT_EQ(count(svg, "class=\"run\""), 2u);
  EXPECT_EQ(count(svg, "class=\"mean\""), 1u);
  EXPECT_NE(svg.find("minibatches (gradient steps)"), std::string::npos);
  EXPECT_NE(svg.find("oracle-normalised return (fraction of optimum)"), std::string::npos);
}

TEST_F(Cli, PlotRejectsEmptyOrMismatchedCsvWithoutWriting) {
  std::ofstream(dir_ / "empty.csv").close();
  CliRun r = cli("plot --metrics " + (dir_ / "empty.csv").string() + " --out " + (dir_ / "e.svg").string());
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(dir_ / "e.svg"));
  std::ofstream(dir_ / "header_only.csv") << devi::kMetricsHeader << '\n';
  r = cli("plot --metrics " + (dir_ / "header_only.csv").string() + " --out " + (dir_ / "h.svg").string());
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(dir_ / "h.svg"));
  std::ofstream(dir_ / "other.csv") << "a,b,c\n1,2,3\n";
  r = cli("plot --metrics " + (dir_ / "other.csv").string() + " --out " + (dir_ / "o.svg").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(fs::exists(dir_ / "o.svg"));
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& e : fs::directory_iterator(fs::path(DEVI_SOURCE_DIR) / "configs"))
    if (e.path().extension() == ".json") EXPECT_NO_THROW(ex::load_config(e.path())) << e.path();
}

TEST(Config, RoundTripsThroughProvenanceJson) {
  nlohmann::json j = {{"model", "dqn"}, {"seeds", {4, 5}}, {"planner", {{"temperature", 0.25}}}};
  const ex::ExperimentConfig a = ex::parse_config(j);
  const ex::ExperimentConfig b = ex::parse_config(ex::to_json(a));
  EXPECT_EQ(ex::to_json(a), ex::to_json(b));
  EXPECT_EQ(b.schedule.planner.temperature, 0.25);
  EXPECT_EQ(b.seeds, (std::vector<std::uint64_t>{4, 5}));
}
