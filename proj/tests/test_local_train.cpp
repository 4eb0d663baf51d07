#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "maskfl/local_train.hpp"
#include "test_support.hpp"

namespace maskfl {
namespace {

using testing::mlp_layout;
using testing::random_dataset;

// One output class: softmax is constant, so the data gradient is exactly 0.
LayoutPtr flat_layout(std::size_t params) {
  return make_layout(LayerLayout({{params, 1, false}}, {}));
}

Dataset zero_gradient_data(std::size_t n, std::size_t dim) {
  Dataset d;
  d.num_classes = 1;
  d.inputs = Matrix(n, dim, 0.5);
  d.labels.assign(n, 0);
  return d;
}

TrainConfig config(std::size_t epochs, std::size_t batch, double lr, double momentum = 0.0,
                   double wd = 0.0) {
  TrainConfig c;
  c.local_epochs = epochs;
  c.batch_size = batch;
  c.lr = lr;
  c.momentum = momentum;
  c.weight_decay = wd;
  c.rng_stream = 1234;
  return c;
}

TEST(LocalSteps, CeilDivision) {
  EXPECT_EQ(local_steps(10, 4, 1), 3u);
  EXPECT_EQ(local_steps(8, 4, 2), 4u);
  EXPECT_EQ(local_steps(1, 64, 10), 10u);
}

TEST(TrainPlain, TauForTenSamplesBatchFour) {
  const auto l = mlp_layout(3, {4}, 2);
  const auto r = train_plain(init_model(l, 1), random_dataset(10, 3, 2, 2), config(1, 4, 0.01));
  EXPECT_EQ(r.tau, 3u);
  EXPECT_EQ(r.samples, 10u);
}

TEST(TrainPlain, TauPropertyOverRandomShapes) {
  std::mt19937_64 eng(5);
  const auto l = mlp_layout(2, {}, 3);
  for (int t = 0; t < 40; ++t) {
    const std::size_t n = 1 + eng() % 30, bs = 1 + eng() % 12, ep = 1 + eng() % 4;
    const auto r = train_plain(init_model(l, t), random_dataset(n, 2, 3, eng()), config(ep, bs, 0.01));
    EXPECT_EQ(r.tau, ep * ((n + bs - 1) / bs));
    EXPECT_EQ(r.samples, n);
  }
}

TEST(TrainPlain, ZeroLearningRateReturnsGlobal) {
  const auto l = mlp_layout(3, {4}, 2);
  const ParamVector g = init_model(l, 3);
  EXPECT_EQ(train_plain(g, random_dataset(9, 3, 2, 4), config(2, 4, 0.0, 0.9, 1e-4)).model, g);
}

TEST(TrainPlain, SingleFullBatchStepMatchesUnroll) {
  const auto l = mlp_layout(4, {5}, 3);
  const ParamVector g = init_model(l, 6);
  const Dataset d = random_dataset(12, 4, 3, 7);
  const auto cfg = config(1, 64, 0.05, 0.9, 1e-3);
  const auto r = train_plain(g, d, cfg);
  const auto grad = loss_and_grad(g, d).grad;
  ASSERT_EQ(r.tau, 1u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    // Velocity starts at zero: v = grad + wd * w, w' = w - lr * v.
    const double v = grad[i] + 1e-3 * g[i];
    EXPECT_NEAR(r.model[i], g[i] - 0.05 * v, 1e-12);
  }
}

TEST(TrainPlain, Deterministic) {
  const auto l = mlp_layout(3, {6}, 3);
  const ParamVector g = init_model(l, 8);
  const Dataset d = random_dataset(25, 3, 3, 9);
  const auto cfg = config(3, 4, 0.01, 0.9, 1e-4);
  const auto a = train_plain(g, d, cfg), b = train_plain(g, d, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.tau, b.tau);
}

TEST(TrainPlain, EmptyDataRejected) {
  const auto l = mlp_layout(3, {}, 2);
  EXPECT_THROW(train_plain(init_model(l, 1), random_dataset(0, 3, 2, 1), config(1, 4, 0.1)),
               std::invalid_argument);
}

TEST(TrainPlain, LossUsuallyDecreasesOnBlobs) {
  int decreased = 0;
  const int trials = 30;
  for (int t = 0; t < trials; ++t) {
    const Dataset d = generate_blobs(4, 30, 8, 1.0, 100 + t);
    const auto l = mlp_layout(8, {16}, 4);
    const ParamVector g = init_model(l, 200 + t);
    auto cfg = config(2, 16, 0.01, 0.9, 1e-4);
    cfg.rng_stream = 300 + t;
    const auto r = train_plain(g, d, cfg);
    decreased += loss_and_grad(r.model, d).loss <= loss_and_grad(g, d).loss;
  }
  EXPECT_GE(decreased, trials * 9 / 10);
}

TEST(AddProxTerm, ScalarContribution) {
  const auto l = flat_layout(1);
  ParamVector g(l, 0.0);
  add_prox_term(g, ParamVector(l, 2.0), ParamVector(l, 1.0), 0.01);
  EXPECT_DOUBLE_EQ(g[0], 0.01);
}

TEST(TrainProx, ZeroMuBitIdenticalToPlain) {
  const auto l = mlp_layout(3, {5}, 3);
  const ParamVector g = init_model(l, 10);
  const Dataset d = random_dataset(30, 3, 3, 11);
  auto cfg = config(3, 8, 0.02, 0.9, 1e-4);
  cfg.mu = 0.0;
  EXPECT_EQ(train_prox(g, d, cfg).model, train_plain(g, d, cfg).model);
}

TEST(TrainProx, StrongProximalTermStaysCloser) {
  const auto l = mlp_layout(3, {5}, 3);
  const ParamVector g = init_model(l, 12);
  const Dataset d = random_dataset(40, 3, 3, 13);
  auto cfg = config(3, 8, 0.05);
  // lr * mu = 1 pulls each iterate fully back toward the anchor.
  cfg.mu = 1.0 / cfg.lr;
  auto dist = [&](const ParamVector& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] - g[i]) * (w[i] - g[i]);
    return std::sqrt(s);
  };
  EXPECT_LT(dist(train_prox(g, d, cfg).model), dist(train_plain(g, d, cfg).model));
}

TEST(TrainScaffold, EqualVariatesMatchMomentumFreePlain) {
  const auto l = mlp_layout(3, {5}, 3);
  const ParamVector g = init_model(l, 14);
  const Dataset d = random_dataset(30, 3, 3, 15);
  const auto c = testing::random_params(l, 16);
  auto cfg = config(2, 8, 0.02, 0.9, 1e-4);
  const auto s = train_scaffold(g, d, cfg, {c, c});
  cfg.momentum = 0.0;
  EXPECT_EQ(s.model, train_plain(g, d, cfg).model);
}

TEST(TrainScaffold, ScalarCorrectedStep) {
  // Zero data gradient plus weight decay 0.5 at w = 1 gives g = 0.5.
  const auto l = flat_layout(1);
  const auto cfg = config(1, 1, 0.1, 0.9, 0.5);
  const auto r = train_scaffold(ParamVector(l, 1.0), zero_gradient_data(1, 1), cfg,
                                {ParamVector(l, 0.2), ParamVector(l, 0.1)});
  EXPECT_NEAR(r.model[0], 0.96, 1e-15);
}

TEST(TrainScaffold, LinearDriftOverThreeSteps) {
  const auto l = flat_layout(3);
  const ParamVector global(l, std::vector<double>{1.0, -2.0, 0.5});
  const ParamVector v(l, std::vector<double>{0.3, -0.1, 2.0});
  const auto cfg = config(1, 1, 0.1);
  const auto r = train_scaffold(global, zero_gradient_data(3, 3), cfg, {ParamVector(l, 0.0), v});
  ASSERT_EQ(r.tau, 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(r.model[i], global[i] - 3 * 0.1 * v[i], 1e-14);
    // c_i - c + (global - w) / (tau lr) = 0 - v + v.
    EXPECT_NEAR((*r.updated_client_c)[i], 0.0, 1e-13);
  }
}

TEST(TrainScaffold, ClientVariateRule) {
  const auto l = mlp_layout(2, {3}, 2);
  const ParamVector g = init_model(l, 17);
  const Dataset d = random_dataset(10, 2, 2, 18);
  const auto ci = testing::random_params(l, 19, -0.1, 0.1);
  const auto c = testing::random_params(l, 20, -0.1, 0.1);
  const auto cfg = config(2, 4, 0.05);
  const auto r = train_scaffold(g, d, cfg, {ci, c});
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_NEAR((*r.updated_client_c)[i],
                ci[i] - c[i] + (g[i] - r.model[i]) / (static_cast<double>(r.tau) * 0.05), 1e-12);
}

TEST(TrainScaffold, RequiresPositiveLearningRate) {
  const auto l = flat_layout(1);
  EXPECT_THROW(train_scaffold(ParamVector(l, 0.0), zero_gradient_data(1, 1), config(1, 1, 0.0),
                              ControlVariate::zeros(l)),
               std::invalid_argument);
}

TEST(TrainConfig, Validation) {
  auto c = config(0, 4, 0.1);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = config(1, 0, 0.1);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = config(1, 1, 0.1);
  c.mu = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace maskfl
