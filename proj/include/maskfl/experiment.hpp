#pragma once

// Experiment orchestration: build the federation described by an
// ExperimentConfig, run R rounds of local training and aggregation, and
// report per-round metrics. Round 0 is the untrained initial model.

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "maskfl/adversary.hpp"
#include "maskfl/aggregation.hpp"
#include "maskfl/config.hpp"
#include "maskfl/datasets.hpp"
#include "maskfl/local_train.hpp"
#include "maskfl/parallel.hpp"
#include "maskfl/rng.hpp"
#include "maskfl/tensor_nn.hpp"

namespace maskfl {

struct RoundMetrics {
  std::size_t round = 0;
  std::string strategy;
  double clean_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::optional<double> asr;
  double aggregation_wall_ms = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

struct RunOptions {
  std::size_t workers = 1;
  /// When false, attack settings are ignored entirely (clean federation).
  bool enable_adversary = true;
  std::function<void(const RoundMetrics&)> on_round;
};

/// Everything fixed before round 1.
struct Federation {
  LayoutPtr layout;
  ParamVector initial_model;
  ClassValidationSets validation;
  Dataset holdout;
  PartitionPlan plan;
  std::vector<Dataset> client_data;
  std::vector<int> malicious;
  std::vector<TriggerPattern> triggers;  // dba only
};

inline std::pair<Dataset, Dataset> load_train_test(const ExperimentConfig& cfg) {
  if (cfg.blobs) {
    const auto& b = *cfg.blobs;
    const std::uint64_t seed = b.seed.value_or(derive_seed(cfg.master_seed, stream::dataset));
    const Dataset all =
        generate_blobs(b.num_classes, b.per_class + b.test_per_class, b.dim, b.spread, seed);
    auto [train, test] = split_head_per_class(all, b.per_class);
    if (b.image_rows > 0) {
      const UnitRange range = UnitRange::fit(train);
      range.apply(train);
      range.apply(test);
      set_image_shape(train, b.image_rows, b.image_cols);
      set_image_shape(test, b.image_rows, b.image_cols);
    }
    return {std::move(train), std::move(test)};
  }
  const auto& s = *cfg.idx;
  Dataset train = load_idx(s.train_images, s.train_labels);
  Dataset test = load_idx(s.test_images, s.test_labels);
  const int classes = std::max(train.num_classes, test.num_classes);
  train.num_classes = test.num_classes = classes;
  if (train.dim() != test.dim()) throw FormatError("train and test image sizes differ");
  return {std::move(train), std::move(test)};
}

inline Federation build_federation(const ExperimentConfig& cfg, bool enable_adversary = true) {
  validate(cfg);
  auto [train, test] = load_train_test(cfg);
  Federation f;
  f.layout = make_layout(
      LayerLayout::mlp(train.dim(), cfg.hidden, static_cast<std::size_t>(train.num_classes)));
  f.initial_model = init_model(f.layout, derive_seed(cfg.master_seed, stream::model_init));

  auto split = split_validation(test, cfg.validation_cap);
  f.validation = std::move(split.validation);
  f.holdout = std::move(split.holdout);
  if (f.holdout.empty()) throw std::runtime_error("holdout test set is empty; lower validation_cap");
  if (cfg.strategy == Strategy::masked && f.validation.all_empty())
    throw std::runtime_error("masked strategy needs validation data; raise validation_cap");

  f.plan = dirichlet_partition(train, cfg.n_clients, cfg.alpha,
                               derive_seed(cfg.master_seed, stream::partition));
  for (const auto& idx : f.plan.assignments) f.client_data.push_back(train.subset(idx));

  const auto& atk = cfg.attack;
  if (!enable_adversary || atk.kind == AttackKind::none) return f;
  const std::uint64_t base = derive_seed(cfg.master_seed, stream::attack, atk.seed);
  f.malicious = select_malicious(cfg.n_clients, atk.malicious_ratio, base);
  if (atk.kind == AttackKind::dba) {
    if (!train.image) throw std::runtime_error("dba needs image-shaped data");
    if (atk.target_class >= train.num_classes)
      throw ConfigError("attack.target_class", "out of range for the dataset");
    f.triggers = corner_triggers(*train.image, atk.num_triggers);
  }
  for (std::size_t k = 0; k < f.malicious.size(); ++k) {
    const auto id = static_cast<std::size_t>(f.malicious[k]);
    const std::uint64_t seed = derive_seed(base, 1, id);
    auto& data = f.client_data[id];
    if (atk.kind == AttackKind::convergence_prevention) {
      data = poison_labels(data, atk.poisoned_data_ratio, seed);
    } else {
      data = inject_backdoor(data, f.triggers[k % f.triggers.size()], atk.poisoned_data_ratio,
                             atk.target_class, seed);
    }
  }
  return f;
}

namespace detail {

inline RoundMetrics measure(const ExperimentConfig& cfg, const Federation& f,
                            const ParamVector& model, std::size_t round, double agg_ms) {
  RoundMetrics m;
  m.round = round;
  m.strategy = to_string(cfg.strategy);
  const auto eval = evaluate(model, f.holdout);
  m.clean_accuracy = eval.accuracy;
  m.per_class_accuracy = eval.per_class_accuracy;
  if (!f.triggers.empty())
    m.asr = evaluate_asr(model, f.holdout, f.triggers, cfg.attack.target_class);
  m.aggregation_wall_ms = cfg.record_timing ? agg_ms : 0.0;
  return m;
}

}  // namespace detail

/// Runs R rounds on a prepared federation. Clients are processed and
/// aggregated in index order.
inline std::vector<RoundMetrics> run_federation(const ExperimentConfig& cfg, const Federation& f,
                                                const RunOptions& opts = {}) {
  const std::size_t n = f.client_data.size();
  std::vector<RoundMetrics> out;
  auto emit = [&](RoundMetrics m) {
    if (opts.on_round) opts.on_round(m);
    out.push_back(std::move(m));
  };

  ParamVector global = f.initial_model;
  emit(detail::measure(cfg, f, global, 0, 0.0));

  std::vector<ParamVector> client_c(n, ParamVector(f.layout, 0.0));
  ParamVector server_c(f.layout, 0.0);
  std::map<int, Mask> masks;

  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    try {
      std::vector<LocalResult> results(n);
      std::vector<ControlReport> reports(n);
      parallel_for(n, opts.workers, [&](std::size_t i) {
        TrainConfig tc = cfg.train;
        tc.rng_stream = derive_seed(cfg.master_seed, stream::local_train, i, r);
        const Dataset& data = f.client_data[i];
        switch (cfg.strategy) {
          case Strategy::fedprox:
            results[i] = train_prox(global, data, tc);
            break;
          case Strategy::scaffold: {
            const bool grad_mode = cfg.scaffold_update == ScaffoldServerUpdate::gradient_diff;
            if (grad_mode) reports[i].grad_global = full_gradient(global, data);
            results[i] = train_scaffold(global, data, tc, {client_c[i], server_c});
            ParamVector delta = *results[i].updated_client_c;
            for (std::size_t j = 0; j < delta.size(); ++j) delta[j] -= client_c[i][j];
            reports[i].client_c_delta = std::move(delta);
            if (grad_mode) reports[i].grad_local = full_gradient(results[i].model, data);
            break;
          }
          default:
            results[i] = train_plain(global, data, tc);
        }
      });

      AggregationInput in;
      in.global_prev = global;
      for (std::size_t i = 0; i < n; ++i) {
        ClientUpdate u;
        u.client_id = static_cast<int>(i);
        u.model = std::move(results[i].model);
        u.samples = results[i].samples;
        u.tau = results[i].tau;
        if (auto it = masks.find(u.client_id); it != masks.end()) u.prev_mask = it->second;
        if (cfg.strategy == Strategy::scaffold) u.control = std::move(reports[i]);
        in.clients.push_back(std::move(u));
      }

      const auto t0 = std::chrono::steady_clock::now();
      switch (cfg.strategy) {
        case Strategy::nwfedavg:
          global = agg_nwfedavg(in);
          break;
        case Strategy::fedavg:
        case Strategy::fedprox:
          global = agg_fedavg(in);
          break;
        case Strategy::fednova:
          global = agg_fednova(in);
          break;
        case Strategy::scaffold: {
          auto res = agg_scaffold(in, server_c, cfg.scaffold_update);
          global = std::move(res.model);
          server_c = std::move(res.server_c);
          break;
        }
        case Strategy::masked: {
          auto res = masked_round(in, f.validation, cfg.mask);
          global = std::move(res.global);
          for (std::size_t i = 0; i < n; ++i) masks[in.clients[i].client_id] = std::move(res.masks[i]);
          break;
        }
      }
      const double agg_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

      if (cfg.strategy == Strategy::scaffold)
        for (std::size_t i = 0; i < n; ++i) client_c[i] = *results[i].updated_client_c;
      if (!global.all_finite()) throw std::runtime_error("non-finite parameters after aggregation");

      emit(detail::measure(cfg, f, global, r, agg_ms));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw std::runtime_error("round " + std::to_string(r) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<RoundMetrics> run_experiment(const ExperimentConfig& cfg,
                                                const RunOptions& opts = {}) {
  return run_federation(cfg, build_federation(cfg, opts.enable_adversary), opts);
}

// ---------------------------------------------------------------------------
// Metric output.

inline std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline constexpr const char* kCsvHeader =
    "round,strategy,clean_accuracy,asr,per_class_accuracy,agg_wall_ms";

inline void write_metrics_csv(std::ostream& out, const std::vector<RoundMetrics>& rows) {
  out << kCsvHeader << '\n';
  for (const auto& m : rows) {
    out << m.round << ',' << m.strategy << ',' << format_real(m.clean_accuracy) << ',';
    if (m.asr) out << format_real(*m.asr);
    out << ',';
    for (std::size_t c = 0; c < m.per_class_accuracy.size(); ++c) {
      if (c) out << ';';
      out << format_real(m.per_class_accuracy[c]);
    }
    out << ',' << format_real(m.aggregation_wall_ms) << '\n';
  }
}

inline nlohmann::json metrics_to_json(const std::vector<RoundMetrics>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& m : rows) {
    nlohmann::json o;
    o["round"] = m.round;
    o["strategy"] = m.strategy;
    o["clean_accuracy"] = m.clean_accuracy;
    o["asr"] = m.asr ? nlohmann::json(*m.asr) : nlohmann::json(nullptr);
    o["per_class_accuracy"] = m.per_class_accuracy;
    o["agg_wall_ms"] = m.aggregation_wall_ms;
    arr.push_back(std::move(o));
  }
  return arr;
}

inline void write_metrics(std::ostream& out, const std::vector<RoundMetrics>& rows,
                          OutputFormat format) {
  if (format == OutputFormat::csv) {
    write_metrics_csv(out, rows);
  } else {
    out << metrics_to_json(rows).dump(2) << '\n';
  }
}

inline void emit_metrics(const std::vector<RoundMetrics>& rows, OutputFormat format,
                         const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_metrics(out, rows, format);
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Sweeps.

struct ComparisonRow {
  std::string label;
  Strategy strategy = Strategy::masked;
  double alpha = 0.0;
  std::uint64_t master_seed = 0;
  double clean_accuracy = 0.0;
  std::optional<double> asr;
  /// Relative accuracy gain (%) of the group's reference run over this row.
  std::optional<double> improvement_pct;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
};

namespace detail {

// Everything that must agree across a sweep: the config minus its axes.
inline nlohmann::json sweep_invariant_part(const ExperimentConfig& c) {
  auto j = config_to_json(c);
  for (const char* axis : {"label", "strategy", "alpha", "master_seed", "output"}) j.erase(axis);
  return j;
}

}  // namespace detail

/// Runs each config and tabulates final-round accuracy (and ASR). Within
/// each (alpha, master_seed) group the reference run is the first masked
/// config, else the first config; other rows get
/// 100 * (A_ref - A_row) / A_row.
inline ComparisonTable compare_runs(const std::vector<ExperimentConfig>& configs,
                                    const RunOptions& opts = {}) {
  if (configs.empty()) throw std::invalid_argument("compare_runs: no configs");
  const auto invariant = detail::sweep_invariant_part(configs.front());
  for (std::size_t i = 1; i < configs.size(); ++i)
    if (detail::sweep_invariant_part(configs[i]) != invariant)
      throw ConfigError("sweep", "config " + std::to_string(i) +
                                     " differs outside the sweep axes "
                                     "(label, strategy, alpha, master_seed, output)");

  ComparisonTable table;
  for (const auto& cfg : configs) {
    RunOptions o = opts;
    o.on_round = nullptr;
    const auto metrics = run_experiment(cfg, o);
    ComparisonRow row;
    row.label = cfg.display_label();
    row.strategy = cfg.strategy;
    row.alpha = cfg.alpha;
    row.master_seed = cfg.master_seed;
    row.clean_accuracy = metrics.back().clean_accuracy;
    row.asr = metrics.back().asr;
    table.rows.push_back(std::move(row));
  }

  std::map<std::pair<double, std::uint64_t>, std::size_t> reference;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto key = std::make_pair(table.rows[i].alpha, table.rows[i].master_seed);
    auto it = reference.find(key);
    if (it == reference.end()) {
      reference.emplace(key, i);
    } else if (table.rows[i].strategy == Strategy::masked &&
               table.rows[it->second].strategy != Strategy::masked) {
      it->second = i;
    }
  }
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    auto& row = table.rows[i];
    const std::size_t ref = reference.at({row.alpha, row.master_seed});
    if (ref == i || row.clean_accuracy <= 0.0) continue;
    row.improvement_pct =
        100.0 * (table.rows[ref].clean_accuracy - row.clean_accuracy) / row.clean_accuracy;
  }
  return table;
}

inline void write_comparison_csv(std::ostream& out, const ComparisonTable& t) {
  out << "label,strategy,alpha,master_seed,clean_accuracy,asr,improvement_pct\n";
  for (const auto& r : t.rows) {
    out << r.label << ',' << to_string(r.strategy) << ',' << format_real(r.alpha) << ','
        << r.master_seed << ',' << format_real(r.clean_accuracy) << ',';
    if (r.asr) out << format_real(*r.asr);
    out << ',';
    if (r.improvement_pct) out << format_real(*r.improvement_pct);
    out << '\n';
  }
}

}  // namespace maskfl
