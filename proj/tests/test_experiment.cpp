#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "maskfl/config.hpp"
#include "maskfl/experiment.hpp"

namespace maskfl {
namespace {

namespace fs = std::filesystem;

ExperimentConfig small_config(Strategy s = Strategy::masked) {
  ExperimentConfig c;
  BlobsSource b;
  b.num_classes = 3;
  b.per_class = 40;
  b.test_per_class = 30;
  b.dim = 8;
  c.blobs = b;
  c.hidden = {8};
  c.n_clients = 4;
  c.alpha = 0.5;
  c.strategy = s;
  c.rounds = 3;
  c.train.local_epochs = 1;
  c.train.batch_size = 16;
  c.validation_cap = 10;
  c.master_seed = 5;
  c.record_timing = false;
  return c;
}

ExperimentConfig image_config(AttackKind kind) {
  auto c = small_config();
  c.blobs->num_classes = 4;
  c.blobs->dim = 64;
  c.blobs->image_rows = 8;
  c.blobs->image_cols = 8;
  c.n_clients = 6;
  c.attack.kind = kind;
  c.attack.malicious_ratio = 0.34;
  c.attack.poisoned_data_ratio = 0.3;
  return c;
}

std::string csv_of(const std::vector<RoundMetrics>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  return os.str();
}

std::string config_error_field(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return {};
}

const char* kBlobs = R"("dataset": {"source": "blobs"})";

// ---------------------------------------------------------------------------
// Config.

TEST(Config, EmptyStrategyNamesField) {
  EXPECT_EQ(config_error_field(std::string(R"({"strategy": "", )") + kBlobs + "}"), "strategy");
  EXPECT_EQ(config_error_field(std::string(R"({"strategy": "krum", )") + kBlobs + "}"), "strategy");
}

TEST(Config, AlphaOnlyOverrideKeepsDefaults) {
  const auto c = parse_config(std::string(R"({"alpha": 0.125, )") + kBlobs + "}");
  EXPECT_EQ(c.alpha, 0.125);
  EXPECT_EQ(c.n_clients, 10u);
  EXPECT_EQ(c.rounds, 100u);
  EXPECT_EQ(c.strategy, Strategy::masked);
  EXPECT_EQ(c.train.local_epochs, 10u);
  EXPECT_EQ(c.train.batch_size, 64u);
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.train.momentum, 0.9);
  EXPECT_EQ(c.train.weight_decay, 1e-4);
  EXPECT_EQ(c.train.mu, 0.01);
  EXPECT_EQ(c.mask.zip_percent, 0.5);
  EXPECT_EQ(c.mask.gamma, 0.5);
  EXPECT_EQ(c.mask.beta, 0.4);
  EXPECT_EQ(c.attack.kind, AttackKind::none);
  EXPECT_EQ(c.validation_cap, 32u);
}

TEST(Config, EmitParseRoundTrip) {
  auto c = image_config(AttackKind::dba);
  c.label = "run-a";
  c.mask.scope = MaskScope::global;
  c.mask.assignment = ClassAssignment::top_models;
  c.mask.top_k = 2;
  c.scaffold_update = ScaffoldServerUpdate::gradient_diff;
  c.blobs->seed = 99;
  c.output_path = "out.json";
  c.output_format = OutputFormat::json;
  EXPECT_EQ(parse_config(emit_config(c)), c);
  const auto d = parse_config(std::string("{") + kBlobs + "}");
  EXPECT_EQ(parse_config(emit_config(d)), d);
  ExperimentConfig idx;
  idx.idx = IdxSource{"a", "b", "c", "d"};
  EXPECT_EQ(parse_config(emit_config(idx)), idx);
}

TEST(Config, Errors) {
  EXPECT_EQ(config_error_field("{}"), "dataset");
  EXPECT_EQ(config_error_field(std::string(R"({"alpha": -1, )") + kBlobs + "}"), "alpha");
  EXPECT_EQ(config_error_field(std::string(R"({"mask": {"gamma": 0}, )") + kBlobs + "}"),
            "mask.gamma");
  EXPECT_EQ(config_error_field(std::string(R"({"train": {"lr": "fast"}, )") + kBlobs + "}"),
            "train.lr");
  EXPECT_EQ(config_error_field(std::string(R"({"bogus": 1, )") + kBlobs + "}"), "bogus");
  EXPECT_THROW(parse_config("{not json"), ConfigError);
}

// ---------------------------------------------------------------------------
// Runs.

TEST(RunExperiment, ZeroRoundsGivesInitialRow) {
  auto c = small_config();
  c.rounds = 0;
  const auto rows = run_experiment(c);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].round, 0u);
}

TEST(RunExperiment, RoundsAreMonotoneAndInRange) {
  const auto rows = run_experiment(small_config());
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    EXPECT_EQ(rows[r].round, r);
    EXPECT_GE(rows[r].clean_accuracy, 0.0);
    EXPECT_LE(rows[r].clean_accuracy, 1.0);
    EXPECT_EQ(rows[r].per_class_accuracy.size(), 3u);
    EXPECT_FALSE(rows[r].asr.has_value());
  }
}

TEST(RunExperiment, DeterministicAcrossWorkerCounts) {
  for (Strategy s : kAllStrategies) {
    const auto c = small_config(s);
    const auto one = run_experiment(c, {1, true, {}});
    EXPECT_EQ(csv_of(one), csv_of(run_experiment(c, {1, true, {}}))) << to_string(s);
    EXPECT_EQ(csv_of(one), csv_of(run_experiment(c, {3, true, {}}))) << to_string(s);
  }
}

TEST(RunExperiment, EveryStrategyStaysFinite) {
  for (Strategy s : kAllStrategies) {
    auto c = small_config(s);
    c.rounds = 5;
    const auto rows = run_experiment(c);
    EXPECT_EQ(rows.size(), 6u) << to_string(s);
    for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.clean_accuracy));
  }
  auto c = small_config(Strategy::scaffold);
  c.scaffold_update = ScaffoldServerUpdate::gradient_diff;
  EXPECT_EQ(run_experiment(c).size(), 4u);
}

TEST(RunExperiment, FedProxWithZeroMuMatchesFedAvg) {
  auto prox = small_config(Strategy::fedprox);
  prox.train.mu = 0.0;
  const auto a = run_experiment(prox), b = run_experiment(small_config(Strategy::fedavg));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t r = 0; r < a.size(); ++r) EXPECT_EQ(a[r].clean_accuracy, b[r].clean_accuracy);
}

TEST(RunExperiment, AttackNoneMatchesDisabledAdversary) {
  for (Strategy s : {Strategy::fedavg, Strategy::masked}) {
    const auto c = small_config(s);
    EXPECT_EQ(run_experiment(c, {1, true, {}}), run_experiment(c, {1, false, {}}));
  }
  // A dba config with the adversary switched off is the clean federation.
  auto dba = image_config(AttackKind::dba);
  auto clean = dba;
  clean.attack = AttackSpec{};
  EXPECT_EQ(run_experiment(dba, {1, false, {}}), run_experiment(clean));
}

TEST(RunExperiment, DbaReportsAsr) {
  const auto rows = run_experiment(image_config(AttackKind::dba));
  for (const auto& r : rows) {
    ASSERT_TRUE(r.asr.has_value());
    EXPECT_GE(*r.asr, 0.0);
    EXPECT_LE(*r.asr, 1.0);
  }
}

TEST(RunExperiment, ConvergencePreventionPoisonsChosenClients) {
  const auto c = image_config(AttackKind::convergence_prevention);
  const auto attacked = build_federation(c);
  const auto clean = build_federation(c, false);
  ASSERT_EQ(attacked.malicious.size(), 2u);
  for (std::size_t i = 0; i < attacked.client_data.size(); ++i) {
    const bool bad = std::count(attacked.malicious.begin(), attacked.malicious.end(),
                                static_cast<int>(i)) > 0;
    EXPECT_EQ(attacked.client_data[i].labels != clean.client_data[i].labels, bad);
    EXPECT_EQ(attacked.client_data[i].inputs, clean.client_data[i].inputs);
  }
}

TEST(RunExperiment, ClientOrderIndependence) {
  const auto c = small_config();
  const Federation f = build_federation(c);
  // Permute client slots, then restore sorted-id order before running.
  std::vector<std::size_t> ids(f.client_data.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), std::mt19937_64(3));
  Federation permuted = f;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    permuted.client_data[k] = f.client_data[ids[k]];
    permuted.plan.assignments[k] = f.plan.assignments[ids[k]];
  }
  Federation restored = permuted;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    restored.client_data[ids[k]] = permuted.client_data[k];
    restored.plan.assignments[ids[k]] = permuted.plan.assignments[k];
  }
  EXPECT_EQ(run_federation(c, restored), run_federation(c, f));
}

TEST(RunExperiment, ErrorsCarryRoundContext) {
  auto c = small_config(Strategy::fedavg);
  c.train.lr = 1e6;
  c.train.momentum = 0.0;
  c.rounds = 50;
  try {
    run_experiment(c);
    FAIL() << "expected divergence";
  } catch (const std::runtime_error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("round ", 0), 0u) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Output.

TEST(Metrics, HeaderOnlyForEmptyStream) {
  EXPECT_EQ(csv_of({}), "round,strategy,clean_accuracy,asr,per_class_accuracy,agg_wall_ms\n");
}

TEST(Metrics, AbsentAsrLeavesColumnEmpty) {
  RoundMetrics m{2, "fedavg", 0.75, {0.5, 1.0}, std::nullopt, 0.0};
  EXPECT_EQ(csv_of({m}), std::string(kCsvHeader) + "\n2,fedavg,0.75,,0.5;1,0\n");
  m.asr = 0.125;
  EXPECT_EQ(csv_of({m}), std::string(kCsvHeader) + "\n2,fedavg,0.75,0.125,0.5;1,0\n");
  EXPECT_TRUE(metrics_to_json({RoundMetrics{}})[0]["asr"].is_null());
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

TEST(Metrics, CsvAndJsonAgree) {
  auto c = image_config(AttackKind::dba);
  c.record_timing = true;
  const auto rows = run_experiment(c);
  std::istringstream csv(csv_of(rows));
  const auto json = metrics_to_json(rows);
  std::string line;
  std::getline(csv, line);
  const auto keys = split(line, ',');
  std::size_t r = 0;
  while (std::getline(csv, line)) {
    const auto fields = split(line, ',');
    ASSERT_EQ(fields.size(), keys.size());
    const auto& o = json.at(r++);
    EXPECT_EQ(o.size(), keys.size());
    EXPECT_EQ(std::stoull(fields[0]), o["round"].get<std::size_t>());
    EXPECT_EQ(fields[1], o["strategy"].get<std::string>());
    EXPECT_EQ(std::stod(fields[2]), o["clean_accuracy"].get<double>());
    EXPECT_EQ(std::stod(fields[3]), o["asr"].get<double>());
    const auto pcs = split(fields[4], ';');
    ASSERT_EQ(pcs.size(), o["per_class_accuracy"].size());
    for (std::size_t k = 0; k < pcs.size(); ++k)
      EXPECT_EQ(std::stod(pcs[k]), o["per_class_accuracy"][k].get<double>());
    EXPECT_EQ(std::stod(fields[5]), o["agg_wall_ms"].get<double>());
  }
  EXPECT_EQ(r, rows.size());
}

TEST(Metrics, TimingDisabledWritesZero) {
  for (const auto& r : run_experiment(small_config())) EXPECT_EQ(r.aggregation_wall_ms, 0.0);
}

TEST(Metrics, UnwritablePathReported) {
  try {
    emit_metrics({}, OutputFormat::csv, "/nonexistent-dir/x.csv");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent-dir/x.csv"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Sweeps.

TEST(Compare, SingleConfigHasNoImprovement) {
  const auto t = compare_runs({small_config()});
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_FALSE(t.rows[0].improvement_pct.has_value());
}

TEST(Compare, SelfComparisonIsZero) {
  auto a = small_config(Strategy::fedavg), b = a;
  a.label = "first";
  b.label = "second";
  const auto t = compare_runs({a, b});
  EXPECT_EQ(t.rows[0].clean_accuracy, t.rows[1].clean_accuracy);
  ASSERT_TRUE(t.rows[1].improvement_pct.has_value());
  EXPECT_EQ(*t.rows[1].improvement_pct, 0.0);
}

TEST(Compare, MatchesIndependentRuns) {
  std::vector<ExperimentConfig> cfgs;
  for (Strategy s : kAllStrategies) cfgs.push_back(small_config(s));
  const auto t = compare_runs(cfgs, {2, true, {}});
  ASSERT_EQ(t.rows.size(), cfgs.size());
  const std::size_t masked = 5;
  ASSERT_EQ(t.rows[masked].strategy, Strategy::masked);
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const double a = run_experiment(cfgs[i]).back().clean_accuracy;
    EXPECT_EQ(t.rows[i].clean_accuracy, a);
    if (i == masked) continue;
    EXPECT_DOUBLE_EQ(*t.rows[i].improvement_pct,
                     100.0 * (t.rows[masked].clean_accuracy - a) / a);
  }
}

TEST(Compare, InconsistentSweepRejected) {
  auto a = small_config(), b = small_config();
  b.train.lr = 0.5;
  try {
    compare_runs({a, b});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "sweep");
  }
}

// ---------------------------------------------------------------------------
// Command line.

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("maskfl-cli-" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  static int run(const std::string& args) {
    const std::string cmd = std::string(MASKFL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

TEST_F(Cli, ExitCodes) {
  const auto good = write("good.json", emit_config(small_config()));
  const auto bad = write("bad.json", std::string(R"({"strategy": "", )") + kBlobs + "}");
  auto broken = small_config();
  broken.blobs.reset();
  broken.idx = IdxSource{(dir_ / "missing").string(), "x", "y", "z"};
  const auto missing = write("missing.json", emit_config(broken));
  EXPECT_EQ(run("run " + good.string() + " --rounds 1"), 0);
  EXPECT_EQ(run("run " + bad.string()), 1);
  EXPECT_EQ(run("run " + missing.string()), 2);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("run " + good.string() + " --format xml"), 1);
}

TEST_F(Cli, OutputFileMatchesLibrary) {
  const auto good = write("good.json", emit_config(small_config()));
  const auto out = dir_ / "m.csv";
  ASSERT_EQ(run("run " + good.string() + " --workers 2 --no-timing --out " + out.string()), 0);
  std::ifstream in(out);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text, csv_of(run_experiment(small_config())));
}

TEST_F(Cli, GenDataRoundTrips) {
  const auto prefix = (dir_ / "blobs").string();
  ASSERT_EQ(run("gen-data --out-prefix " + prefix +
                " --classes 3 --per-class 5 --test-per-class 2 --dim 16 --rows 4 --cols 4"),
            0);
  const Dataset train = load_idx(prefix + "-train-images-idx3-ubyte",
                                 prefix + "-train-labels-idx1-ubyte");
  EXPECT_EQ(train.size(), 15u);
  EXPECT_EQ(train.image, (ImageShape{4, 4}));
  ExperimentConfig c = small_config(Strategy::fedavg);
  c.blobs.reset();
  c.idx = IdxSource{prefix + "-train-images-idx3-ubyte", prefix + "-train-labels-idx1-ubyte",
                    prefix + "-test-images-idx3-ubyte", prefix + "-test-labels-idx1-ubyte"};
  c.n_clients = 3;
  c.validation_cap = 1;
  EXPECT_EQ(run("run " + write("idx.json", emit_config(c)).string() + " --rounds 1"), 0);
}

}  // namespace
}  // namespace maskfl
