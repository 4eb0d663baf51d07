#pragma once

// Attack injection and measurement: malicious-client selection under the
// honest-majority cap, random label flipping (convergence prevention),
// pixel-trigger backdoors (distributed backdoor attack) and attack success
// rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "maskfl/datasets.hpp"
#include "maskfl/rng.hpp"
#include "maskfl/tensor_nn.hpp"

namespace maskfl {

enum class AttackKind { none, convergence_prevention, dba };

struct AttackSpec {
  AttackKind kind = AttackKind::none;
  double malicious_ratio = 0.0;
  double poisoned_data_ratio = 0.0;
  ClassIndex target_class = 0;
  std::size_t num_triggers = 4;
  std::uint64_t seed = 0;

  bool operator==(const AttackSpec&) const = default;
};

struct PixelCoord {
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const PixelCoord&) const = default;
};

struct TriggerPattern {
  std::size_t pattern_id = 0;
  std::vector<PixelCoord> pixels;
  double value = 1.0;
};

/// m = min(floor(ratio * N), floor((N - 1) / 2)), so malicious clients are
/// never a majority.
inline std::size_t malicious_count(std::size_t n_clients, double ratio) {
  if (n_clients == 0 || !(ratio > 0.0)) return 0;
  const double raw = std::floor(ratio * static_cast<double>(n_clients) + 1e-9);
  const std::size_t cap = (n_clients - 1) / 2;
  return std::min(static_cast<std::size_t>(std::max(0.0, raw)), cap);
}

/// Malicious client ids, sorted ascending.
inline std::vector<int> select_malicious(std::size_t n_clients, double ratio, std::uint64_t seed) {
  const std::size_t m = malicious_count(n_clients, ratio);
  Rng rng(seed);
  const auto picked = rng.sample_without_replacement(n_clients, m);
  std::vector<int> ids(picked.begin(), picked.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::size_t poisoned_count(std::size_t n, double fraction) {
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::min(k, n);
}

/// round(fraction * N) seeded samples get a label drawn uniformly from the
/// other C - 1 classes.
inline Dataset poison_labels(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw std::invalid_argument("poison_labels: fraction must be in [0, 1]");
  if (data.num_classes < 2) throw std::invalid_argument("poison_labels: need at least 2 classes");
  Dataset out = data;
  Rng rng(seed);
  const auto chosen = rng.sample_without_replacement(data.size(), poisoned_count(data.size(), fraction));
  const auto others = static_cast<std::size_t>(data.num_classes - 1);
  for (std::size_t i : chosen) {
    const auto r = static_cast<ClassIndex>(rng.index(others));
    out.labels[i] = r < data.labels[i] ? r : r + 1;
  }
  return out;
}

/// 2x2 patches at the four image corners: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
inline std::vector<TriggerPattern> corner_triggers(const ImageShape& shape, std::size_t count = 4,
                                                   double value = 1.0) {
  if (count > 4) throw std::invalid_argument("corner_triggers: at most 4 corner patterns");
  if (shape.rows < 4 || shape.cols < 4)
    throw std::invalid_argument("corner_triggers: image must be at least 4x4");
  const std::size_t r1 = shape.rows - 2, c1 = shape.cols - 2;
  const std::size_t origins[4][2] = {{0, 0}, {0, c1}, {r1, 0}, {r1, c1}};
  std::vector<TriggerPattern> out;
  for (std::size_t k = 0; k < count; ++k) {
    TriggerPattern t{k, {}, value};
    for (std::size_t dr = 0; dr < 2; ++dr)
      for (std::size_t dc = 0; dc < 2; ++dc)
        t.pixels.push_back({origins[k][0] + dr, origins[k][1] + dc});
    out.push_back(std::move(t));
  }
  return out;
}

namespace detail {

inline void check_trigger(const TriggerPattern& t, const ImageShape& shape) {
  for (const auto& p : t.pixels)
    if (p.row >= shape.rows || p.col >= shape.cols)
      throw std::out_of_range("trigger " + std::to_string(t.pattern_id) + ": pixel (" +
                              std::to_string(p.row) + ", " + std::to_string(p.col) +
                              ") outside " + std::to_string(shape.rows) + "x" +
                              std::to_string(shape.cols) + " image");
}

inline const ImageShape& require_image(const Dataset& d, const char* where) {
  if (!d.image) throw std::invalid_argument(std::string(where) + ": dataset is not image-shaped");
  return *d.image;
}

inline void stamp(std::span<double> row, const TriggerPattern& t, const ImageShape& shape) {
  for (const auto& p : t.pixels) row[p.row * shape.cols + p.col] = t.value;
}

}  // namespace detail

/// round(fraction * N) seeded samples get the trigger stamped on and their
/// label set to `target`.
inline Dataset inject_backdoor(const Dataset& data, const TriggerPattern& trigger, double fraction,
                               ClassIndex target, std::uint64_t seed) {
  const auto& shape = detail::require_image(data, "inject_backdoor");
  detail::check_trigger(trigger, shape);
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw std::invalid_argument("inject_backdoor: fraction must be in [0, 1]");
  if (target < 0 || target >= data.num_classes)
    throw std::invalid_argument("inject_backdoor: target class out of range");
  Dataset out = data;
  Rng rng(seed);
  for (std::size_t i :
       rng.sample_without_replacement(data.size(), poisoned_count(data.size(), fraction))) {
    detail::stamp(out.inputs.row(i), trigger, shape);
    out.labels[i] = target;
  }
  return out;
}

/// Stamps the union of all patterns onto every row.
inline Matrix apply_global_trigger(const Matrix& inputs, const ImageShape& shape,
                                   std::span<const TriggerPattern> triggers) {
  if (inputs.cols != shape.rows * shape.cols)
    throw ShapeError("apply_global_trigger: input width does not match image shape");
  for (const auto& t : triggers) detail::check_trigger(t, shape);
  Matrix out = inputs;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (const auto& t : triggers) detail::stamp(out.row(r), t, shape);
  return out;
}

/// Fraction of non-target test samples predicted as `target` once the
/// global trigger is applied.
inline double evaluate_asr(const ParamVector& model, const Dataset& test,
                           std::span<const TriggerPattern> triggers, ClassIndex target) {
  if (test.empty()) throw std::invalid_argument("evaluate_asr: empty test set");
  const auto& shape = detail::require_image(test, "evaluate_asr");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] != target) idx.push_back(i);
  if (idx.empty()) throw std::invalid_argument("evaluate_asr: test set has only target-class samples");
  const Dataset clean = test.subset(idx);
  const auto pred = predict(model, apply_global_trigger(clean.inputs, shape, triggers));
  const auto hits = std::count(pred.begin(), pred.end(), target);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace maskfl
