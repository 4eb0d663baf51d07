#pragma once

// One client's local training for a round: plain SGD, FedProx proximal SGD,
// or SCAFFOLD control-variate-corrected SGD.

#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "maskfl/datasets.hpp"
#include "maskfl/rng.hpp"
#include "maskfl/tensor_nn.hpp"

namespace maskfl {

struct TrainConfig {
  std::size_t local_epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double mu = 0.01;  // FedProx proximal coefficient
  std::uint64_t rng_stream = 0;

  SgdHyper hyper() const { return {lr, momentum, weight_decay}; }

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (local_epochs < 1) throw std::invalid_argument("TrainConfig: local_epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(mu >= 0.0)) throw std::invalid_argument("TrainConfig: mu must be >= 0");
  }
};

struct ControlVariate {
  ParamVector client_c;
  ParamVector server_c;

  static ControlVariate zeros(const LayoutPtr& layout) {
    return {ParamVector(layout, 0.0), ParamVector(layout, 0.0)};
  }
};

struct LocalResult {
  ParamVector model;
  std::size_t tau = 0;
  std::size_t samples = 0;
  std::optional<ParamVector> updated_client_c;
};

/// Optimizer steps for one call: epochs * ceil(n / batch_size).
inline std::size_t local_steps(std::size_t n, std::size_t batch_size, std::size_t epochs) {
  return epochs * ((n + batch_size - 1) / batch_size);
}

namespace detail {

// Mini-batch SGD over `data`, reshuffled every epoch from cfg.rng_stream.
// `adjust(w, grad)` may modify the batch gradient before the optimizer step.
template <class GradAdjust>
LocalResult run_local_sgd(const ParamVector& global, const Dataset& data, const TrainConfig& cfg,
                          SgdHyper hyper, GradAdjust&& adjust) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("local training: client has no data");
  ParamVector w = global;
  OptimState state(w, hyper);
  Rng rng(cfg.rng_stream);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t tau = 0;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Dataset batch =
          data.subset(std::span<const std::size_t>(order.data() + start, end - start));
      auto lg = loss_and_grad(w, batch);
      adjust(w, lg.grad);
      w = sgd_step(std::move(w), lg.grad, state);
      ++tau;
    }
  }
  return LocalResult{std::move(w), tau, data.size(), std::nullopt};
}

}  // namespace detail

inline LocalResult train_plain(const ParamVector& global, const Dataset& data,
                               const TrainConfig& cfg) {
  return detail::run_local_sgd(global, data, cfg, cfg.hyper(),
                               [](const ParamVector&, ParamVector&) {});
}

/// g += mu * (w - global), the gradient of (mu / 2) * ||w - global||^2.
/// mu == 0 leaves g untouched.
inline void add_prox_term(ParamVector& g, const ParamVector& w, const ParamVector& global,
                          double mu) {
  if (mu == 0.0) return;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += mu * (w[i] - global[i]);
}

inline LocalResult train_prox(const ParamVector& global, const Dataset& data,
                              const TrainConfig& cfg) {
  return detail::run_local_sgd(global, data, cfg, cfg.hyper(),
                               [&](const ParamVector& w, ParamVector& g) {
                                 add_prox_term(g, w, global, cfg.mu);
                               });
}

/// Steps with g - c_i + c and no momentum. The client variate is refreshed
/// as c_i <- c_i - c + (global - model) / (tau * lr).
inline LocalResult train_scaffold(const ParamVector& global, const Dataset& data,
                                  const TrainConfig& cfg, const ControlVariate& cv) {
  require_same_shape(global, cv.client_c, "train_scaffold");
  require_same_shape(global, cv.server_c, "train_scaffold");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train_scaffold: lr must be > 0");
  // c - c_i is exactly zero when the variates agree.
  ParamVector correction(global.layout_ptr(), 0.0);
  for (std::size_t i = 0; i < correction.size(); ++i)
    correction[i] = cv.server_c[i] - cv.client_c[i];

  SgdHyper hyper = cfg.hyper();
  hyper.momentum = 0.0;
  auto res = detail::run_local_sgd(global, data, cfg, hyper,
                                   [&](const ParamVector&, ParamVector& g) {
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] += correction[i];
                                   });
  ParamVector c_new(global.layout_ptr(), 0.0);
  const double scale = 1.0 / (static_cast<double>(res.tau) * cfg.lr);
  for (std::size_t i = 0; i < c_new.size(); ++i)
    c_new[i] = cv.client_c[i] - cv.server_c[i] + (global[i] - res.model[i]) * scale;
  res.updated_client_c = std::move(c_new);
  return res;
}

/// Full-batch mean gradient of the local loss at `w` (used by the
/// gradient-difference server update for SCAFFOLD).
inline ParamVector full_gradient(const ParamVector& w, const Dataset& data) {
  return loss_and_grad(w, data).grad;
}

}  // namespace maskfl
