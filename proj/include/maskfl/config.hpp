#pragma once

// Declarative experiment description and its JSON encoding.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskfl/adversary.hpp"
#include "maskfl/aggregation.hpp"
#include "maskfl/errors.hpp"
#include "maskfl/local_train.hpp"

namespace maskfl {

enum class Strategy { nwfedavg, fedavg, fedprox, fednova, scaffold, masked };

inline constexpr Strategy kAllStrategies[] = {Strategy::nwfedavg, Strategy::fedavg,
                                              Strategy::fedprox,  Strategy::fednova,
                                              Strategy::scaffold, Strategy::masked};

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::nwfedavg: return "nwfedavg";
    case Strategy::fedavg: return "fedavg";
    case Strategy::fedprox: return "fedprox";
    case Strategy::fednova: return "fednova";
    case Strategy::scaffold: return "scaffold";
    case Strategy::masked: return "masked";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(const std::string& s) {
  for (Strategy k : kAllStrategies)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

struct BlobsSource {
  int num_classes = 4;
  std::size_t per_class = 200;       // training samples per class
  std::size_t test_per_class = 100;  // test samples per class
  std::size_t dim = 16;
  double spread = 1.0;
  std::optional<std::uint64_t> seed;  // defaults to the master seed
  std::size_t image_rows = 0;         // 0: not image-shaped
  std::size_t image_cols = 0;

  bool operator==(const BlobsSource&) const = default;
};

struct IdxSource {
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;

  bool operator==(const IdxSource&) const = default;
};

enum class OutputFormat { csv, json };

struct ExperimentConfig {
  std::string label;  // defaults to the strategy name
  std::optional<BlobsSource> blobs;
  std::optional<IdxSource> idx;
  std::vector<std::size_t> hidden{64};
  std::size_t n_clients = 10;
  double alpha = 0.5;
  Strategy strategy = Strategy::masked;
  std::size_t rounds = 100;
  TrainConfig train;
  MaskConfig mask;
  ScaffoldServerUpdate scaffold_update = ScaffoldServerUpdate::standard;
  AttackSpec attack;
  std::uint64_t master_seed = 0;
  std::size_t validation_cap = 32;
  std::string output_path;
  OutputFormat output_format = OutputFormat::csv;
  bool record_timing = true;

  std::string display_label() const { return label.empty() ? to_string(strategy) : label; }

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

using nlohmann::json;

template <class T>
T get_field(const json& obj, const char* key, const std::string& path, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + key, std::string("wrong type (") + e.what() + ")");
  }
}

inline const json& section(const json& root, const char* key) {
  static const json empty = json::object();
  if (!root.contains(key)) return empty;
  const json& s = root.at(key);
  if (!s.is_object()) throw ConfigError(key, "expected an object");
  return s;
}

inline void check_keys(const json& obj, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(path + k, "unknown key");
  }
}

inline std::string scope_name(MaskScope s) { return s == MaskScope::global ? "global" : "per_tensor"; }
inline std::string assignment_name(ClassAssignment a) {
  return a == ClassAssignment::top_models ? "top_models" : "dominant_class";
}
inline std::string attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::convergence_prevention: return "convergence_prevention";
    case AttackKind::dba: return "dba";
  }
  return "none";
}
inline std::string scaffold_name(ScaffoldServerUpdate u) {
  return u == ScaffoldServerUpdate::gradient_diff ? "gradient_diff" : "standard";
}

}  // namespace detail

/// Throws ConfigError naming the first invalid field.
inline void validate(const ExperimentConfig& c) {
  if (!c.blobs && !c.idx) throw ConfigError("dataset", "missing dataset source");
  if (c.blobs && c.idx) throw ConfigError("dataset", "give exactly one dataset source");
  if (c.blobs) {
    const auto& b = *c.blobs;
    if (b.num_classes < 2) throw ConfigError("dataset.num_classes", "must be >= 2");
    if (b.per_class < 1) throw ConfigError("dataset.per_class", "must be >= 1");
    if (b.dim < 1) throw ConfigError("dataset.dim", "must be >= 1");
    if (!(b.spread >= 0.0)) throw ConfigError("dataset.spread", "must be >= 0");
    if ((b.image_rows == 0) != (b.image_cols == 0))
      throw ConfigError("dataset.image_rows", "image_rows and image_cols go together");
    if (b.image_rows && b.image_rows * b.image_cols != b.dim)
      throw ConfigError("dataset.image_rows", "image_rows * image_cols must equal dim");
  }
  if (c.idx) {
    if (c.idx->train_images.empty()) throw ConfigError("dataset.train_images", "required");
    if (c.idx->train_labels.empty()) throw ConfigError("dataset.train_labels", "required");
    if (c.idx->test_images.empty()) throw ConfigError("dataset.test_images", "required");
    if (c.idx->test_labels.empty()) throw ConfigError("dataset.test_labels", "required");
  }
  for (std::size_t h : c.hidden)
    if (h < 1) throw ConfigError("model.hidden", "layer widths must be >= 1");
  if (c.n_clients < 1) throw ConfigError("n_clients", "must be >= 1");
  if (!(c.alpha > 0.0)) throw ConfigError("alpha", "must be > 0");
  const auto& t = c.train;
  if (t.local_epochs < 1) throw ConfigError("train.local_epochs", "must be >= 1");
  if (t.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (!(t.lr > 0.0)) throw ConfigError("train.lr", "must be > 0");
  if (!(t.momentum >= 0.0 && t.momentum < 1.0)) throw ConfigError("train.momentum", "must be in [0, 1)");
  if (!(t.weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
  if (!(t.mu >= 0.0)) throw ConfigError("train.mu", "must be >= 0");
  const auto& m = c.mask;
  if (!(m.zip_percent > 0.0 && m.zip_percent <= 1.0)) throw ConfigError("mask.zip_percent", "must be in (0, 1]");
  if (!(m.gamma > 0.0 && m.gamma <= 1.0)) throw ConfigError("mask.gamma", "must be in (0, 1]");
  if (!(m.beta >= 0.0 && m.beta <= 1.0)) throw ConfigError("mask.beta", "must be in [0, 1]");
  if (m.top_k < 1) throw ConfigError("mask.top_k", "must be >= 1");
  const auto& a = c.attack;
  if (!(a.malicious_ratio >= 0.0 && a.malicious_ratio <= 1.0))
    throw ConfigError("attack.malicious_ratio", "must be in [0, 1]");
  if (!(a.poisoned_data_ratio >= 0.0 && a.poisoned_data_ratio <= 1.0))
    throw ConfigError("attack.poisoned_data_ratio", "must be in [0, 1]");
  if (a.kind == AttackKind::dba) {
    if (a.num_triggers < 1 || a.num_triggers > 4)
      throw ConfigError("attack.num_triggers", "must be in [1, 4]");
    if (a.target_class < 0) throw ConfigError("attack.target_class", "must be >= 0");
    if (c.blobs && a.target_class >= c.blobs->num_classes)
      throw ConfigError("attack.target_class", "out of range");
    if (c.blobs && c.blobs->image_rows == 0)
      throw ConfigError("dataset.image_rows", "dba needs image-shaped data");
  }
}

inline ExperimentConfig config_from_json(const nlohmann::json& root) {
  using detail::get_field;
  using nlohmann::json;
  if (!root.is_object()) throw ConfigError("<root>", "expected a JSON object");
  detail::check_keys(root, "", {"label", "strategy", "dataset", "model", "n_clients", "alpha",
                                "rounds", "master_seed", "validation_cap", "train", "mask",
                                "scaffold", "attack", "output"});
  ExperimentConfig c;
  c.label = get_field<std::string>(root, "label", "", "");
  if (root.contains("strategy")) {
    const auto s = get_field<std::string>(root, "strategy", "", "");
    if (s.empty()) throw ConfigError("strategy", "must not be empty");
    const auto parsed = parse_strategy(s);
    if (!parsed) throw ConfigError("strategy", "unknown strategy '" + s + "'");
    c.strategy = *parsed;
  }
  c.n_clients = get_field<std::size_t>(root, "n_clients", "", c.n_clients);
  c.alpha = get_field<double>(root, "alpha", "", c.alpha);
  c.rounds = get_field<std::size_t>(root, "rounds", "", c.rounds);
  c.master_seed = get_field<std::uint64_t>(root, "master_seed", "", c.master_seed);
  c.validation_cap = get_field<std::size_t>(root, "validation_cap", "", c.validation_cap);

  if (!root.contains("dataset")) throw ConfigError("dataset", "missing dataset source");
  const json& ds = detail::section(root, "dataset");
  const auto source = get_field<std::string>(ds, "source", "dataset.", "");
  if (source == "blobs") {
    detail::check_keys(ds, "dataset.", {"source", "num_classes", "per_class", "test_per_class",
                                        "dim", "spread", "seed", "image_rows", "image_cols"});
    BlobsSource b;
    b.num_classes = get_field<int>(ds, "num_classes", "dataset.", b.num_classes);
    b.per_class = get_field<std::size_t>(ds, "per_class", "dataset.", b.per_class);
    b.test_per_class = get_field<std::size_t>(ds, "test_per_class", "dataset.", b.test_per_class);
    b.dim = get_field<std::size_t>(ds, "dim", "dataset.", b.dim);
    b.spread = get_field<double>(ds, "spread", "dataset.", b.spread);
    if (ds.contains("seed")) b.seed = get_field<std::uint64_t>(ds, "seed", "dataset.", 0);
    b.image_rows = get_field<std::size_t>(ds, "image_rows", "dataset.", 0);
    b.image_cols = get_field<std::size_t>(ds, "image_cols", "dataset.", 0);
    c.blobs = b;
  } else if (source == "idx") {
    detail::check_keys(ds, "dataset.", {"source", "train_images", "train_labels", "test_images",
                                        "test_labels"});
    IdxSource s;
    s.train_images = get_field<std::string>(ds, "train_images", "dataset.", "");
    s.train_labels = get_field<std::string>(ds, "train_labels", "dataset.", "");
    s.test_images = get_field<std::string>(ds, "test_images", "dataset.", "");
    s.test_labels = get_field<std::string>(ds, "test_labels", "dataset.", "");
    c.idx = s;
  } else if (source.empty()) {
    throw ConfigError("dataset.source", "missing dataset source");
  } else {
    throw ConfigError("dataset.source", "unknown source '" + source + "'");
  }

  const json& model = detail::section(root, "model");
  detail::check_keys(model, "model.", {"hidden"});
  c.hidden = get_field<std::vector<std::size_t>>(model, "hidden", "model.", c.hidden);

  const json& tr = detail::section(root, "train");
  detail::check_keys(tr, "train.", {"local_epochs", "batch_size", "lr", "momentum",
                                    "weight_decay", "mu"});
  c.train.local_epochs = get_field<std::size_t>(tr, "local_epochs", "train.", c.train.local_epochs);
  c.train.batch_size = get_field<std::size_t>(tr, "batch_size", "train.", c.train.batch_size);
  c.train.lr = get_field<double>(tr, "lr", "train.", c.train.lr);
  c.train.momentum = get_field<double>(tr, "momentum", "train.", c.train.momentum);
  c.train.weight_decay = get_field<double>(tr, "weight_decay", "train.", c.train.weight_decay);
  c.train.mu = get_field<double>(tr, "mu", "train.", c.train.mu);

  const json& mk = detail::section(root, "mask");
  detail::check_keys(mk, "mask.", {"zip_percent", "gamma", "beta", "scope", "assignment", "top_k"});
  c.mask.zip_percent = get_field<double>(mk, "zip_percent", "mask.", c.mask.zip_percent);
  c.mask.gamma = get_field<double>(mk, "gamma", "mask.", c.mask.gamma);
  c.mask.beta = get_field<double>(mk, "beta", "mask.", c.mask.beta);
  const auto scope = get_field<std::string>(mk, "scope", "mask.", "per_tensor");
  if (scope == "per_tensor") c.mask.scope = MaskScope::per_tensor;
  else if (scope == "global") c.mask.scope = MaskScope::global;
  else throw ConfigError("mask.scope", "expected per_tensor or global");
  const auto assign = get_field<std::string>(mk, "assignment", "mask.", "dominant_class");
  if (assign == "dominant_class") c.mask.assignment = ClassAssignment::dominant_class;
  else if (assign == "top_models") c.mask.assignment = ClassAssignment::top_models;
  else throw ConfigError("mask.assignment", "expected dominant_class or top_models");
  c.mask.top_k = get_field<std::size_t>(mk, "top_k", "mask.", c.mask.top_k);

  const json& sc = detail::section(root, "scaffold");
  detail::check_keys(sc, "scaffold.", {"server_update"});
  const auto su = get_field<std::string>(sc, "server_update", "scaffold.", "standard");
  if (su == "standard") c.scaffold_update = ScaffoldServerUpdate::standard;
  else if (su == "gradient_diff") c.scaffold_update = ScaffoldServerUpdate::gradient_diff;
  else throw ConfigError("scaffold.server_update", "expected standard or gradient_diff");

  const json& at = detail::section(root, "attack");
  detail::check_keys(at, "attack.", {"kind", "malicious_ratio", "poisoned_data_ratio",
                                     "target_class", "num_triggers", "seed"});
  const auto kind = get_field<std::string>(at, "kind", "attack.", "none");
  if (kind == "none") c.attack.kind = AttackKind::none;
  else if (kind == "convergence_prevention" || kind == "cp") c.attack.kind = AttackKind::convergence_prevention;
  else if (kind == "dba") c.attack.kind = AttackKind::dba;
  else throw ConfigError("attack.kind", "expected none, convergence_prevention or dba");
  c.attack.malicious_ratio = get_field<double>(at, "malicious_ratio", "attack.", 0.0);
  c.attack.poisoned_data_ratio = get_field<double>(at, "poisoned_data_ratio", "attack.", 0.0);
  c.attack.target_class = get_field<int>(at, "target_class", "attack.", 0);
  c.attack.num_triggers = get_field<std::size_t>(at, "num_triggers", "attack.", 4);
  c.attack.seed = get_field<std::uint64_t>(at, "seed", "attack.", 0);

  const json& out = detail::section(root, "output");
  detail::check_keys(out, "output.", {"path", "format", "record_timing"});
  c.output_path = get_field<std::string>(out, "path", "output.", "");
  const auto fmt = get_field<std::string>(out, "format", "output.", "csv");
  if (fmt == "csv") c.output_format = OutputFormat::csv;
  else if (fmt == "json") c.output_format = OutputFormat::json;
  else throw ConfigError("output.format", "expected csv or json");
  c.record_timing = get_field<bool>(out, "record_timing", "output.", true);

  validate(c);
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json j;
  if (!c.label.empty()) j["label"] = c.label;
  j["strategy"] = to_string(c.strategy);
  if (c.blobs) {
    const auto& b = *c.blobs;
    j["dataset"] = {{"source", "blobs"},          {"num_classes", b.num_classes},
                    {"per_class", b.per_class},   {"test_per_class", b.test_per_class},
                    {"dim", b.dim},               {"spread", b.spread},
                    {"image_rows", b.image_rows}, {"image_cols", b.image_cols}};
    if (b.seed) j["dataset"]["seed"] = *b.seed;
  } else if (c.idx) {
    j["dataset"] = {{"source", "idx"},
                    {"train_images", c.idx->train_images},
                    {"train_labels", c.idx->train_labels},
                    {"test_images", c.idx->test_images},
                    {"test_labels", c.idx->test_labels}};
  }
  j["model"] = {{"hidden", c.hidden}};
  j["n_clients"] = c.n_clients;
  j["alpha"] = c.alpha;
  j["rounds"] = c.rounds;
  j["master_seed"] = c.master_seed;
  j["validation_cap"] = c.validation_cap;
  j["train"] = {{"local_epochs", c.train.local_epochs}, {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},                     {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay}, {"mu", c.train.mu}};
  j["mask"] = {{"zip_percent", c.mask.zip_percent},
               {"gamma", c.mask.gamma},
               {"beta", c.mask.beta},
               {"scope", detail::scope_name(c.mask.scope)},
               {"assignment", detail::assignment_name(c.mask.assignment)},
               {"top_k", c.mask.top_k}};
  j["scaffold"] = {{"server_update", detail::scaffold_name(c.scaffold_update)}};
  j["attack"] = {{"kind", detail::attack_name(c.attack.kind)},
                 {"malicious_ratio", c.attack.malicious_ratio},
                 {"poisoned_data_ratio", c.attack.poisoned_data_ratio},
                 {"target_class", c.attack.target_class},
                 {"num_triggers", c.attack.num_triggers},
                 {"seed", c.attack.seed}};
  j["output"] = {{"path", c.output_path},
                 {"format", c.output_format == OutputFormat::json ? "json" : "csv"},
                 {"record_timing", c.record_timing}};
  return j;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", std::string("malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string emit_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace maskfl
