#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedavg/error.hpp"
#include "fedavg/nn.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using fedavg::LabeledExample;
using fedavg::ModelSpec;
using fedavg::ParameterSet;

namespace {

ParameterSet randomized(const ModelSpec& spec, std::mt19937_64& gen) {
  auto layers = fedavg::init_params(spec, gen()).layers();
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (auto& l : layers)
    for (auto& v : l.values) v = d(gen);
  return ParameterSet(std::move(layers));
}

ParameterSet logistic(std::vector<double> w, double b) {
  return ParameterSet({fedavg::Layer{"w0", std::move(w)}, fedavg::Layer{"b0", {b}}});
}

fedavg::ClientDataset separable_2d(std::size_t n) {
  std::mt19937_64 gen(17);
  std::normal_distribution<double> noise(0.0, 0.3);
  fedavg::ClientDataset ds;
  ds.client_id = "toy";
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double c = y == 1 ? 1.5 : -1.5;
    LabeledExample e{{c + noise(gen), c + noise(gen)}, y};
    (i % 5 == 0 ? ds.val : ds.train).push_back(e);
  }
  return ds;
}

}  // namespace

TEST(InitParams, ShapesAndDeterminism) {
  ModelSpec lr{4, {}};
  const auto p = fedavg::init_params(lr, 1);
  ASSERT_EQ(p.layer_count(), 2u);
  EXPECT_EQ(p.layer(0).name, "w0");
  EXPECT_EQ(p.layer(0).values.size(), 4u);
  EXPECT_EQ(p.layer(1).name, "b0");
  EXPECT_EQ(p.layer(1).values.size(), 1u);

  ModelSpec mlp{4, {8}};
  EXPECT_EQ(mlp.parameter_count(), 4u * 8 + 8 + 8 * 1 + 1);
  EXPECT_EQ(fedavg::init_params(mlp, 9).value_count(), 49u);
  EXPECT_EQ(fedavg::init_params(mlp, 9), fedavg::init_params(mlp, 9));
  EXPECT_FALSE(fedavg::init_params(mlp, 9) == fedavg::init_params(mlp, 10));
}

TEST(InitParams, GlorotBoundsAndZeroBias) {
  ModelSpec spec{10, {6}};
  const auto p = fedavg::init_params(spec, 4);
  const double s0 = std::sqrt(6.0 / (10 + 6));
  for (double v : p.find("w0")->values) EXPECT_LE(std::abs(v), s0);
  for (double v : p.find("b0")->values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(fedavg::infer_spec(p), spec);
}

TEST(Forward, Examples) {
  ModelSpec spec{3, {4}};
  const auto zero = fedavg::zeros_like(fedavg::init_params(spec, 1));
  EXPECT_EQ(fedavg::forward(zero, std::vector<double>{5, -2, 7}), 0.5);
  EXPECT_EQ(fedavg::forward(logistic({1, 0}, 0), std::vector<double>{0, 5}), 0.5);
  EXPECT_THROW(fedavg::forward(logistic({1, 0}, 0), std::vector<double>{1}), fedavg::StructuralError);
}

TEST(Forward, MatchesScalarOracle) {
  std::mt19937_64 gen(21);
  for (int rep = 0; rep < 100; ++rep) {
    ModelSpec spec{static_cast<std::size_t>(1 + rep % 7), rep % 3 == 0 ? std::vector<std::size_t>{}
                                                                       : std::vector<std::size_t>{3, 2}};
    const auto p = randomized(spec, gen);
    const auto xs = oracle::random_examples(gen, 5, spec.input_dim);
    for (const auto& e : xs) EXPECT_NEAR(fedavg::forward(p, e.features), oracle::forward(p, e.features), 1e-12);
  }
}

TEST(BceLoss, AnalyticValues) {
  EXPECT_NEAR(fedavg::bce_loss(0.5, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(fedavg::bce_loss(0.9, 1), -std::log(0.9), 1e-15);
  EXPECT_NEAR(fedavg::bce_loss(0.9, 0), -std::log(0.1), 1e-12);
  EXPECT_NEAR(fedavg::bce_loss(0.5, 1), 0.693147, 1e-6);
  EXPECT_NEAR(fedavg::bce_loss(0.9, 1), 0.105361, 1e-6);
}

TEST(BceLoss, MeanMatchesScalarOracle) {
  std::mt19937_64 gen(8);
  for (int rep = 0; rep < 50; ++rep) {
    const auto p = randomized(ModelSpec{4, {5}}, gen);
    const auto xs = oracle::random_examples(gen, 17, 4);
    EXPECT_NEAR(fedavg::mean_bce(p, xs), oracle::mean_bce(p, xs), 1e-12);
  }
  EXPECT_EQ(fedavg::mean_bce(logistic({1}, 0), {}), 0.0);
}

TEST(Gradient, EmptyBatchIsUsageError) {
  EXPECT_THROW(fedavg::gradient(logistic({1}, 0), {}), fedavg::UsageError);
}

TEST(Gradient, SaturatedCorrectPredictionsAreFlat) {
  const auto p = logistic({40, 40}, 0);
  std::vector<LabeledExample> batch = {{{1, 1}, 1}, {{2, 1}, 1}, {{-1, -1}, 0}, {{-1, -2}, 0}};
  EXPECT_LT(fedavg::l2_norm(fedavg::gradient(p, batch)), 1e-6);
}

TEST(Gradient, MatchesCentralDifferences) {
  std::mt19937_64 gen(1234);
  gradcheck::Report r;
  for (int rep = 0; rep < 50; ++rep) {
    const auto spec = gradcheck::random_spec(gen);
    const auto p = randomized(spec, gen);
    const auto batch = oracle::random_examples(gen, 1 + rep % 9, spec.input_dim);
    gradcheck::check(p, batch, r);
  }
  EXPECT_EQ(r.failures, 0u) << r.first_failure;
  EXPECT_GT(r.checked, 100u);
}

TEST(AdamStep, ZeroGradientLeavesParams) {
  const auto p = logistic({0.5, -1}, 0.25);
  fedavg::TrainConfig cfg;
  const auto [next, st] = fedavg::adam_step(p, fedavg::zeros_like(p), fedavg::OptimizerState::fresh(p), cfg);
  EXPECT_EQ(next, p);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(AdamStep, FirstUnitGradientStep) {
  const ParameterSet p({fedavg::Layer{"w0", {0.0}}, fedavg::Layer{"b0", {0.0}}});
  const ParameterSet g({fedavg::Layer{"w0", {1.0}}, fedavg::Layer{"b0", {0.0}}});
  fedavg::TrainConfig cfg;
  const auto [next, st] = fedavg::adam_step(p, g, fedavg::OptimizerState::fresh(p), cfg);
  // lr * 1 / (1 + eps), about 9.99999e-4
  EXPECT_NEAR(-next.layer(0).values[0], 9.99999e-4, 1e-9);
  EXPECT_NEAR(-next.layer(0).values[0], 1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(AdamStep, MatchesScalarReferenceBitwise) {
  std::mt19937_64 gen(99);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  fedavg::TrainConfig cfg;
  cfg.learning_rate = 0.01;
  for (int rep = 0; rep < 20; ++rep) {
    ParameterSet p({fedavg::Layer{"w0", {d(gen), d(gen), d(gen)}}, fedavg::Layer{"b0", {d(gen)}}});
    std::vector<oracle::ScalarAdam> ref(4);
    std::vector<double> expect = {p.layer(0).values[0], p.layer(0).values[1], p.layer(0).values[2],
                                  p.layer(1).values[0]};
    auto state = fedavg::OptimizerState::fresh(p);
    for (int step = 0; step < 2; ++step) {
      ParameterSet g({fedavg::Layer{"w0", {d(gen), d(gen), d(gen)}}, fedavg::Layer{"b0", {d(gen)}}});
      for (int i = 0; i < 3; ++i) expect[i] = ref[i].step(expect[i], g.layer(0).values[i], cfg);
      expect[3] = ref[3].step(expect[3], g.layer(1).values[0], cfg);
      auto [next, st] = fedavg::adam_step(p, g, state, cfg);
      p = std::move(next);
      state = std::move(st);
    }
    for (int i = 0; i < 3; ++i) EXPECT_EQ(p.layer(0).values[i], expect[i]);
    EXPECT_EQ(p.layer(1).values[0], expect[3]);
  }
}

TEST(AdamStep, ShapeMismatch) {
  const auto p = logistic({1, 2}, 0);
  EXPECT_THROW(fedavg::adam_step(p, logistic({1}, 0), fedavg::OptimizerState::fresh(p), {}), fedavg::StructuralError);
}

TEST(TrainLocal, Preconditions) {
  auto ds = separable_2d(40);
  const auto p = fedavg::init_params({2, {}}, 1);
  auto no_train = ds;
  no_train.train.clear();
  EXPECT_THROW(fedavg::train_local(p, no_train, {}), fedavg::UsageError);
  auto no_val = ds;
  no_val.val.clear();
  EXPECT_THROW(fedavg::train_local(p, no_val, {}), fedavg::UsageError);
  fedavg::TrainConfig zero;
  zero.epochs = 0;
  EXPECT_THROW(fedavg::train_local(p, ds, zero), fedavg::UsageError);
}

TEST(TrainLocal, SingleEpochHistory) {
  const auto ds = separable_2d(40);
  const auto r = fedavg::train_local(fedavg::init_params({2, {3}}, 2), ds, {});
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best.params, r.history[0].params);
  EXPECT_EQ(r.best.epoch_index, 0u);
}

TEST(TrainLocal, DeterministicAndImproving) {
  const auto ds = separable_2d(200);
  fedavg::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.seed = 5;
  const auto init = fedavg::init_params({2, {}}, 3);
  const auto a = fedavg::train_local(init, ds, cfg);
  const auto b = fedavg::train_local(init, ds, cfg);
  EXPECT_EQ(a.best.params, b.best.params);
  ASSERT_EQ(a.history.size(), 20u);
  EXPECT_LT(a.history.back().train_loss, a.history.front().train_loss);
}

TEST(TrainLocal, BestIsMinimumValidationLoss) {
  const auto ds = separable_2d(120);
  fedavg::TrainConfig cfg;
  cfg.epochs = 12;
  cfg.learning_rate = 0.05;
  const auto r = fedavg::train_local(fedavg::init_params({2, {4}}, 6), ds, cfg);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < r.history.size(); ++i)
    if (r.history[i].val_loss < r.history[arg].val_loss) arg = i;
  EXPECT_EQ(r.best.epoch_index, arg);
  EXPECT_EQ(r.best.params, r.history[arg].params);

  cfg.checkpoint = fedavg::CheckpointPolicy::final_epoch;
  const auto f = fedavg::train_local(fedavg::init_params({2, {4}}, 6), ds, cfg);
  EXPECT_EQ(f.best.params, f.history.back().params);
}

TEST(TrainLocal, DimensionMismatch) {
  const auto ds = separable_2d(20);
  EXPECT_THROW(fedavg::train_local(fedavg::init_params({3, {}}, 1), ds, {}), fedavg::StructuralError);
}
