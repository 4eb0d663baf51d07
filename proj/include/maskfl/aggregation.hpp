#pragma once

// Server-side aggregation strategies.
//
// Baselines: unweighted mean (nwFedAvg), sample-weighted mean (FedAvg),
// step-normalized updates (FedNova) and SCAFFOLD's mean plus server
// control-variate update.
//
// Masked strategy, per client model:
//   1. dominant class c* = argmax_c accuracy(model, V_c)
//   2. G = grad of the mean loss over V_{c*}
//   3. new mask: 1 where |G| >= tau (k-th largest |G|, k = max(1, round(p*len))),
//      gamma elsewhere; per tensor or over the whole vector
//   4. mask = (1 - beta) * new + beta * previous (previous = all-ones at start)
//   5. global = sum_i omega_i * (model_i .* mask_i) / sum_i omega_i,
//      omega_i = sum of mask_i
// Clients are reduced in the order given; callers present them sorted by id.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskfl/datasets.hpp"
#include "maskfl/tensor_nn.hpp"

namespace maskfl {

struct Mask {
  ParamVector values;
  double gamma = 0.5;
  std::size_t round = 0;

  static Mask ones(const LayoutPtr& layout, double gamma) {
    return {ParamVector(layout, 1.0), gamma, 0};
  }
};

enum class MaskScope { per_tensor, global };

/// How each client model is matched to a validation class.
enum class ClassAssignment {
  dominant_class,  // per-client argmax of class accuracy
  top_models,      // per-class ranking of client models
};

struct MaskConfig {
  double zip_percent = 0.5;
  double gamma = 0.5;
  double beta = 0.4;
  MaskScope scope = MaskScope::per_tensor;
  ClassAssignment assignment = ClassAssignment::dominant_class;
  std::size_t top_k = 1;

  void validate() const {
    if (!(zip_percent > 0.0 && zip_percent <= 1.0))
      throw std::invalid_argument("MaskConfig: zip_percent must be in (0, 1]");
    if (!(gamma > 0.0 && gamma <= 1.0))
      throw std::invalid_argument("MaskConfig: gamma must be in (0, 1]");
    if (!(beta >= 0.0 && beta <= 1.0))
      throw std::invalid_argument("MaskConfig: beta must be in [0, 1]");
    if (top_k < 1) throw std::invalid_argument("MaskConfig: top_k must be >= 1");
  }

  bool operator==(const MaskConfig&) const = default;
};

/// SCAFFOLD bookkeeping a client reports to the server.
struct ControlReport {
  std::optional<ParamVector> client_c_delta;  // new c_i - old c_i
  std::optional<ParamVector> grad_local;      // grad F_i at the trained model
  std::optional<ParamVector> grad_global;     // grad F_i at the broadcast model
};

struct ClientUpdate {
  int client_id = 0;
  ParamVector model;
  std::size_t samples = 0;
  std::size_t tau = 0;
  std::optional<Mask> prev_mask;
  std::optional<ControlReport> control;
};

struct AggregationInput {
  std::vector<ClientUpdate> clients;
  ParamVector global_prev;

  void validate(const char* where) const {
    if (clients.empty()) throw std::invalid_argument(std::string(where) + ": no clients");
    for (const auto& c : clients) require_same_shape(c.model, clients.front().model, where);
    if (global_prev.size() > 0) require_same_shape(global_prev, clients.front().model, where);
  }
};

/// sum_i weights[i] * vectors[i], accumulated in list order from zero.
inline ParamVector weighted_sum(std::span<const ParamVector* const> vectors,
                                std::span<const double> weights) {
  ParamVector out(vectors.front()->layout_ptr(), 0.0);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto src = vectors[i]->values();
    const double w = weights[i];
    auto dst = out.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += w * src[j];
  }
  return out;
}

namespace detail {

inline std::vector<const ParamVector*> models_of(const AggregationInput& in) {
  std::vector<const ParamVector*> out;
  for (const auto& c : in.clients) out.push_back(&c.model);
  return out;
}

}  // namespace detail

inline ParamVector agg_nwfedavg(const AggregationInput& in) {
  in.validate("agg_nwfedavg");
  const auto models = detail::models_of(in);
  const std::vector<double> w(models.size(), 1.0 / static_cast<double>(models.size()));
  return weighted_sum(models, w);
}

inline ParamVector agg_fedavg(const AggregationInput& in) {
  in.validate("agg_fedavg");
  double total = 0.0;
  for (const auto& c : in.clients) {
    if (c.samples < 1) throw std::invalid_argument("agg_fedavg: client with zero samples");
    total += static_cast<double>(c.samples);
  }
  std::vector<double> w;
  for (const auto& c : in.clients) w.push_back(static_cast<double>(c.samples) / total);
  return weighted_sum(detail::models_of(in), w);
}

/// global + (sum_i p_i * delta_i) / sum_i p_i with p_i = n_i tau_i / sum_j n_j tau_j.
inline ParamVector agg_fednova(const AggregationInput& in) {
  in.validate("agg_fednova");
  if (in.global_prev.size() == 0) throw std::invalid_argument("agg_fednova: missing global model");
  double total = 0.0;
  for (const auto& c : in.clients) {
    if (c.tau < 1) throw std::invalid_argument("agg_fednova: tau must be >= 1");
    total += static_cast<double>(c.samples) * static_cast<double>(c.tau);
  }
  if (!(total > 0.0)) throw std::invalid_argument("agg_fednova: all clients have zero samples");
  std::vector<double> p;
  double p_sum = 0.0;
  for (const auto& c : in.clients) {
    p.push_back(static_cast<double>(c.samples) * static_cast<double>(c.tau) / total);
    p_sum += p.back();
  }
  ParamVector out = in.global_prev;
  std::vector<double> acc(out.size(), 0.0);
  for (std::size_t i = 0; i < in.clients.size(); ++i) {
    const auto& m = in.clients[i].model;
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += p[i] * (m[j] - in.global_prev[j]);
  }
  for (std::size_t j = 0; j < acc.size(); ++j) out[j] += acc[j] / p_sum;
  return out;
}

enum class ScaffoldServerUpdate {
  standard,       // c += mean(new c_i - old c_i)
  gradient_diff,  // c += mean(grad F_i(w_i) - grad F_i(w))
};

struct ScaffoldResult {
  ParamVector model;
  ParamVector server_c;
};

inline ScaffoldResult agg_scaffold(const AggregationInput& in, const ParamVector& server_c,
                                   ScaffoldServerUpdate mode) {
  in.validate("agg_scaffold");
  require_same_shape(server_c, in.clients.front().model, "agg_scaffold");
  ScaffoldResult out{agg_nwfedavg(in), server_c};
  const double inv_n = 1.0 / static_cast<double>(in.clients.size());
  std::vector<double> acc(server_c.size(), 0.0);
  for (const auto& c : in.clients) {
    if (!c.control)
      throw std::invalid_argument("agg_scaffold: client " + std::to_string(c.client_id) +
                                  " sent no control data");
    if (mode == ScaffoldServerUpdate::standard) {
      if (!c.control->client_c_delta)
        throw std::invalid_argument("agg_scaffold: client " + std::to_string(c.client_id) +
                                    " missing control-variate delta");
      const auto& d = *c.control->client_c_delta;
      require_same_shape(d, server_c, "agg_scaffold");
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += d[j];
    } else {
      if (!c.control->grad_local || !c.control->grad_global)
        throw std::invalid_argument("agg_scaffold: client " + std::to_string(c.client_id) +
                                    " missing gradient pair");
      const auto& gl = *c.control->grad_local;
      const auto& gg = *c.control->grad_global;
      require_same_shape(gl, server_c, "agg_scaffold");
      require_same_shape(gg, server_c, "agg_scaffold");
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gl[j] - gg[j];
    }
  }
  for (std::size_t j = 0; j < acc.size(); ++j) out.server_c[j] += inv_n * acc[j];
  return out;
}

// ---------------------------------------------------------------------------
// Masked strategy building blocks.

/// argmax over per-class accuracies; entries < 0 mark empty classes and are
/// skipped. Ties go to the lowest class index.
inline ClassIndex argmax_class(std::span<const double> per_class_accuracy) {
  ClassIndex best = -1;
  for (std::size_t c = 0; c < per_class_accuracy.size(); ++c) {
    const double a = per_class_accuracy[c];
    if (a < 0.0) continue;
    if (best < 0 || a > per_class_accuracy[static_cast<std::size_t>(best)])
      best = static_cast<ClassIndex>(c);
  }
  if (best < 0) throw std::invalid_argument("argmax_class: every validation class is empty");
  return best;
}

/// Accuracy of `model` on each V_c; empty classes report kAbsentClass.
inline std::vector<double> class_accuracies(const ParamVector& model,
                                            const ClassValidationSets& vsets) {
  std::vector<double> acc(vsets.num_classes(), kAbsentClass);
  for (std::size_t c = 0; c < vsets.num_classes(); ++c)
    if (!vsets.per_class[c].empty()) acc[c] = evaluate(model, vsets.per_class[c]).accuracy;
  return acc;
}

inline ClassIndex assign_dominant_class(const ParamVector& model,
                                        const ClassValidationSets& vsets) {
  if (vsets.all_empty())
    throw std::invalid_argument("assign_dominant_class: all validation sets are empty");
  return argmax_class(class_accuracies(model, vsets));
}

inline ParamVector class_gradient(const ParamVector& model, const Dataset& vc) {
  if (vc.empty()) throw std::invalid_argument("class_gradient: empty validation set");
  return loss_and_grad(model, vc).grad;
}

/// Number of entries kept at full weight: max(1, round(p * len)).
inline std::size_t retain_count(std::size_t len, double p) {
  const auto k = static_cast<std::size_t>(std::llround(p * static_cast<double>(len)));
  return std::clamp<std::size_t>(k, 1, len);
}

/// k-th largest |g| with k = retain_count(len, p).
inline double topk_threshold(std::span<const double> g, double p) {
  if (g.empty()) throw std::invalid_argument("topk_threshold: empty gradient");
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("topk_threshold: p must be in (0, 1]");
  std::vector<double> mag(g.size());
  std::transform(g.begin(), g.end(), mag.begin(), [](double v) { return std::abs(v); });
  const std::size_t k = retain_count(mag.size(), p);
  std::nth_element(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(k - 1), mag.end(),
                   std::greater<>());
  return mag[k - 1];
}

struct ScopedThreshold {
  TensorSlice slice;
  double tau = 0.0;
};

/// One threshold per tensor, or a single one over the whole vector.
inline std::vector<ScopedThreshold> mask_thresholds(const ParamVector& g, double p,
                                                    MaskScope scope) {
  std::vector<ScopedThreshold> out;
  if (scope == MaskScope::global) {
    out.push_back({{0, g.size()}, topk_threshold(g.values(), p)});
    return out;
  }
  for (const auto& t : g.layout().tensors())
    out.push_back({t, topk_threshold(g.values().subspan(t.offset, t.size), p)});
  return out;
}

/// 1 where |g| >= tau of its scope unit, gamma elsewhere.
inline Mask build_mask(const ParamVector& g, const MaskConfig& cfg) {
  cfg.validate();
  Mask m{ParamVector(g.layout_ptr(), cfg.gamma), cfg.gamma, 0};
  for (const auto& st : mask_thresholds(g, cfg.zip_percent, cfg.scope))
    for (std::size_t i = st.slice.offset; i < st.slice.offset + st.slice.size; ++i)
      if (std::abs(g[i]) >= st.tau) m.values[i] = 1.0;
  return m;
}

/// (1 - beta) * fresh + beta * prev, kept inside [gamma, 1].
inline Mask update_mask(const Mask& fresh, const Mask& prev, double beta) {
  require_same_shape(fresh.values, prev.values, "update_mask");
  if (fresh.gamma != prev.gamma)
    throw std::invalid_argument("update_mask: gamma mismatch (" + std::to_string(fresh.gamma) +
                                " vs " + std::to_string(prev.gamma) + ")");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("update_mask: beta must be in [0, 1]");
  Mask out{ParamVector(fresh.values.layout_ptr(), 0.0), fresh.gamma,
           std::max(fresh.round, prev.round + 1)};
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double v = (1.0 - beta) * fresh.values[i] + beta * prev.values[i];
    out.values[i] = std::clamp(v, fresh.gamma, 1.0);
  }
  return out;
}

inline double mask_importance(const Mask& m) {
  double s = 0.0;
  for (double v : m.values.values()) s += v;
  return s;
}

inline ParamVector masked_aggregate(std::span<const ParamVector> models,
                                    std::span<const Mask> masks) {
  if (models.empty()) throw std::invalid_argument("masked_aggregate: no models");
  if (models.size() != masks.size())
    throw std::invalid_argument("masked_aggregate: model and mask counts differ");
  std::vector<ParamVector> applied;
  applied.reserve(models.size());
  std::vector<double> omega;
  double omega_sum = 0.0;
  for (std::size_t i = 0; i < models.size(); ++i) {
    require_same_shape(models[i], models.front(), "masked_aggregate");
    require_same_shape(masks[i].values, models[i], "masked_aggregate");
    ParamVector a = models[i];
    for (std::size_t j = 0; j < a.size(); ++j) a[j] *= masks[i].values[j];
    applied.push_back(std::move(a));
    omega.push_back(mask_importance(masks[i]));
    omega_sum += omega.back();
  }
  if (!(omega_sum > 0.0)) throw std::invalid_argument("masked_aggregate: zero total importance");
  std::vector<const ParamVector*> ptrs;
  for (const auto& a : applied) ptrs.push_back(&a);
  for (double& w : omega) w /= omega_sum;
  return weighted_sum(ptrs, omega);
}

/// Alternative class assignment: for every class, rank all client models
/// by accuracy on V_c and select the best `top_k`. A model selected for
/// several classes keeps the one it scores highest on (lowest index on
/// ties); a model selected for none falls back to its dominant class.
inline std::vector<ClassIndex> assign_by_top_models(
    const std::vector<std::vector<double>>& accuracy_by_client, std::size_t top_k) {
  const std::size_t n = accuracy_by_client.size();
  if (n == 0) return {};
  const std::size_t classes = accuracy_by_client.front().size();
  std::vector<std::vector<ClassIndex>> selected_for(n);
  for (std::size_t c = 0; c < classes; ++c) {
    if (accuracy_by_client.front()[c] < 0.0) continue;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return accuracy_by_client[a][c] > accuracy_by_client[b][c];
    });
    for (std::size_t r = 0; r < std::min(top_k, n); ++r)
      selected_for[order[r]].push_back(static_cast<ClassIndex>(c));
  }
  std::vector<ClassIndex> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& acc = accuracy_by_client[i];
    if (selected_for[i].empty()) {
      out[i] = argmax_class(acc);
      continue;
    }
    ClassIndex best = selected_for[i].front();
    for (ClassIndex c : selected_for[i])
      if (acc[static_cast<std::size_t>(c)] > acc[static_cast<std::size_t>(best)]) best = c;
    out[i] = best;
  }
  return out;
}

struct MaskedRoundResult {
  ParamVector global;
  std::vector<Mask> masks;                // aligned with inputs.clients
  std::vector<ClassIndex> assigned_class;  // aligned with inputs.clients
};

/// One round of masked aggregation. Clients without a previous mask start
/// from all-ones.
inline MaskedRoundResult masked_round(const AggregationInput& in, const ClassValidationSets& vsets,
                                      const MaskConfig& cfg) {
  in.validate("masked_round");
  cfg.validate();
  if (vsets.all_empty()) throw std::invalid_argument("masked_round: all validation sets are empty");
  const std::size_t n = in.clients.size();

  std::vector<std::vector<double>> acc(n);
  for (std::size_t i = 0; i < n; ++i) acc[i] = class_accuracies(in.clients[i].model, vsets);

  MaskedRoundResult out;
  if (cfg.assignment == ClassAssignment::top_models) {
    out.assigned_class = assign_by_top_models(acc, cfg.top_k);
  } else {
    for (const auto& a : acc) out.assigned_class.push_back(argmax_class(a));
  }

  std::vector<ParamVector> models;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& client = in.clients[i];
    const auto& vc = vsets.per_class[static_cast<std::size_t>(out.assigned_class[i])];
    const Mask fresh = build_mask(class_gradient(client.model, vc), cfg);
    const Mask prev = client.prev_mask ? *client.prev_mask
                                       : Mask::ones(client.model.layout_ptr(), cfg.gamma);
    out.masks.push_back(update_mask(fresh, prev, cfg.beta));
    models.push_back(client.model);
  }
  out.global = masked_aggregate(models, out.masks);
  return out;
}

}  // namespace maskfl
