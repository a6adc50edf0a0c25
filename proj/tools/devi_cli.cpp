// Command-line front end: train, transfer, oracle-dump, gradcheck, plot.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "devi/experiment.hpp"

namespace ex = devi::experiment;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct Common {
  std::string config;
  std::string out;
  std::size_t parallel = 1;
  std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment JSON")->required();
  cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
  cmd->add_option("--parallel", c.parallel, "worker threads for seed fan-out")->check(CLI::PositiveNumber);
  cmd->add_option("--seed-override", c.seed_override, "run this single seed instead of the configured list");
}

ex::ExperimentConfig resolve(const Common& c) {
  ex::ExperimentConfig cfg = ex::load_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed_override) cfg.seeds = {*c.seed_override};
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic value iteration experiments"};
  app.require_subcommand(1);

  Common train_opts, transfer_opts, oracle_opts, grad_opts;
  CLI::App* train = app.add_subcommand("train", "train one model per seed");
  add_common(train, train_opts);

  CLI::App* transfer = app.add_subcommand("transfer", "frozen-weight evaluation on transfer tasks");
  add_common(transfer, transfer_opts);
  std::vector<std::string> checkpoints;
  transfer->add_option("--checkpoints", checkpoints, "checkpoint files (default: the configured seeds' outputs)");

  CLI::App* oracle = app.add_subcommand("oracle-dump", "write exact Q tables of the transfer tasks");
  add_common(oracle, oracle_opts);

  CLI::App* grad = app.add_subcommand("gradcheck", "tape gradients against finite differences");
  add_common(grad, grad_opts);
  std::string fault = "none";
  grad->add_option("--inject-fault", fault, "corrupt a backward rule (negative control)")
      ->check(CLI::IsMember({"none", "relu_backward_halved"}));

  CLI::App* plot = app.add_subcommand("plot", "SVG curves from metrics CSVs");
  std::vector<std::string> metrics;
  std::string svg;
  plot->add_option("--metrics", metrics, "metrics CSV files")->required();
  plot->add_option("--out", svg, "SVG file to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) {
      ex::cmd_train(resolve(train_opts), train_opts.parallel, std::cout);
    } else if (*transfer) {
      const ex::ExperimentConfig cfg = resolve(transfer_opts);
      std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
      if (paths.empty()) paths = ex::default_checkpoints(cfg);
      ex::cmd_transfer(cfg, paths, transfer_opts.parallel, std::cout);
    } else if (*oracle) {
      ex::cmd_oracle_dump(resolve(oracle_opts), std::cout);
    } else if (*grad) {
      const auto f = fault == "none" ? devi::diff::Fault::None : devi::diff::Fault::ReluBackwardHalved;
      if (!ex::cmd_gradcheck(resolve(grad_opts), f, std::cout).ok()) return kRuntimeError;
    } else if (*plot) {
      ex::cmd_plot(std::vector<fs::path>(metrics.begin(), metrics.end()), svg);
      std::cout << "wrote " << svg << '\n';
    }
  } catch (const ex::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
