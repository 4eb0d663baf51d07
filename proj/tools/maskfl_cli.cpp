// maskfl command-line driver.
//
//   maskfl run <config.json> [--rounds N] [--seed S] [--out PATH] [--format csv|json]
//   maskfl compare <config.json>... [--out PATH]
//   maskfl gen-data --out-prefix P [blob options]
//
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "maskfl/config.hpp"
#include "maskfl/datasets.hpp"
#include "maskfl/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct RunArgs {
  std::string config;
  std::optional<std::size_t> rounds;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> format;
  std::size_t workers = 1;
  bool no_timing = false;
};

struct CompareArgs {
  std::vector<std::string> configs;
  std::optional<std::string> out;
  std::optional<std::size_t> rounds;
  std::size_t workers = 1;
};

struct GenArgs {
  int classes = 4;
  std::size_t per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t dim = 64;
  double spread = 1.0;
  std::uint64_t seed = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string prefix;
};

int cmd_run(const RunArgs& a) {
  auto cfg = maskfl::load_config(a.config);
  if (a.rounds) cfg.rounds = *a.rounds;
  if (a.seed) cfg.master_seed = *a.seed;
  if (a.out) cfg.output_path = *a.out;
  if (a.format) cfg.output_format = *a.format == "json" ? maskfl::OutputFormat::json
                                                        : maskfl::OutputFormat::csv;
  if (a.no_timing) cfg.record_timing = false;
  maskfl::validate(cfg);

  maskfl::RunOptions opts;
  opts.workers = a.workers;
  opts.on_round = [](const maskfl::RoundMetrics& m) {
    std::cerr << "round " << m.round << "  acc " << m.clean_accuracy;
    if (m.asr) std::cerr << "  asr " << *m.asr;
    std::cerr << '\n';
  };
  const auto metrics = maskfl::run_experiment(cfg, opts);
  if (cfg.output_path.empty()) {
    maskfl::write_metrics(std::cout, metrics, cfg.output_format);
  } else {
    maskfl::emit_metrics(metrics, cfg.output_format, cfg.output_path);
  }
  return kExitOk;
}

int cmd_compare(const CompareArgs& a) {
  std::vector<maskfl::ExperimentConfig> cfgs;
  for (const auto& path : a.configs) {
    auto cfg = maskfl::load_config(path);
    if (a.rounds) cfg.rounds = *a.rounds;
    cfgs.push_back(std::move(cfg));
  }
  maskfl::RunOptions opts;
  opts.workers = a.workers;
  const auto table = maskfl::compare_runs(cfgs, opts);
  if (a.out) {
    std::ofstream out(*a.out);
    if (!out) throw std::runtime_error("cannot open " + *a.out + " for writing");
    maskfl::write_comparison_csv(out, table);
  }
  maskfl::write_comparison_csv(std::cout, table);
  return kExitOk;
}

int cmd_gen_data(const GenArgs& a) {
  const std::size_t rows = a.rows ? a.rows : 1;
  const std::size_t cols = a.cols ? a.cols : a.dim;
  if (rows * cols != a.dim) throw maskfl::ConfigError("rows", "rows * cols must equal dim");
  const auto all = maskfl::generate_blobs(a.classes, a.per_class + a.test_per_class, a.dim,
                                          a.spread, a.seed);
  auto [train, test] = maskfl::split_head_per_class(all, a.per_class);
  const auto range = maskfl::UnitRange::fit(train);
  range.apply(train);
  range.apply(test);
  maskfl::set_image_shape(train, rows, cols);
  maskfl::set_image_shape(test, rows, cols);
  maskfl::write_idx(train, a.prefix + "-train-images-idx3-ubyte",
                    a.prefix + "-train-labels-idx1-ubyte");
  std::cout << a.prefix << "-train-{images-idx3,labels-idx1}-ubyte: " << train.size()
            << " samples\n";
  if (!test.empty()) {
    maskfl::write_idx(test, a.prefix + "-test-images-idx3-ubyte",
                      a.prefix + "-test-labels-idx1-ubyte");
    std::cout << a.prefix << "-test-{images-idx3,labels-idx1}-ubyte: " << test.size()
              << " samples\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with class-aware gradient-masking aggregation"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run one experiment and write per-round metrics");
  run_cmd->add_option("config", run.config, "Experiment config (JSON)")->required();
  run_cmd->add_option("--rounds", run.rounds, "Override the number of rounds");
  run_cmd->add_option("--seed", run.seed, "Override the master seed");
  run_cmd->add_option("--out", run.out, "Metrics output path (default: stdout)");
  run_cmd->add_option("--format", run.format, "Metrics format")
      ->check(CLI::IsMember({"csv", "json"}));
  run_cmd->add_option("--workers", run.workers, "Client training threads")
      ->check(CLI::PositiveNumber);
  run_cmd->add_flag("--no-timing", run.no_timing, "Write 0 for aggregation wall time");

  CompareArgs cmp;
  auto* cmp_cmd = app.add_subcommand("compare", "Run a sweep and tabulate final accuracy");
  cmp_cmd->add_option("configs", cmp.configs, "Experiment configs (JSON)")->required();
  cmp_cmd->add_option("--out", cmp.out, "Also write the table to this CSV file");
  cmp_cmd->add_option("--rounds", cmp.rounds, "Override the number of rounds");
  cmp_cmd->add_option("--workers", cmp.workers, "Client training threads")
      ->check(CLI::PositiveNumber);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a Gaussian-blob dataset as IDX files");
  gen_cmd->add_option("--out-prefix", gen.prefix, "Output path prefix")->required();
  gen_cmd->add_option("--classes", gen.classes, "Number of classes")->check(CLI::Range(2, 255));
  gen_cmd->add_option("--per-class", gen.per_class, "Training samples per class")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--test-per-class", gen.test_per_class, "Test samples per class");
  gen_cmd->add_option("--dim", gen.dim, "Input dimension")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--spread", gen.spread, "Per-class standard deviation")
      ->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--seed", gen.seed, "RNG seed");
  gen_cmd->add_option("--rows", gen.rows, "Image rows (rows * cols = dim)");
  gen_cmd->add_option("--cols", gen.cols, "Image columns");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*cmp_cmd) return cmd_compare(cmp);
    if (*gen_cmd) return cmd_gen_data(gen);
  } catch (const maskfl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}
