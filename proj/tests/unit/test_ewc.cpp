#include <gtest/gtest.h>

#include <cmath>

#include "ewcdr/errors.hpp"
#include "ewcdr/ewc.hpp"
#include "ewcdr/log.hpp"
#include "ewcdr/ops.hpp"

using namespace ewcdr;

namespace {

FisherAnchor make_anchor(std::vector<double> f, std::vector<double> theta_star, int task = 1) {
  FisherAnchor a;
  a.fisher = std::move(f);
  a.anchor = std::move(theta_star);
  a.task_id = task;
  return a;
}

ViTConfig toy_vit() {
  ViTConfig c;
  c.image = {4, 4, 1};
  c.patch_size = 2;
  c.depth = 1;
  c.heads = 1;
  c.hidden_dim = 4;
  c.mlp_dim = 4;
  c.num_classes = 2;
  return c;
}

LabeledDataset toy_data(std::size_t per_class) {
  Rng rng(3);
  LabeledDataset d;
  d.images = Tensor({2 * per_class, 4, 4, 1});
  for (double& v : d.images.values()) v = rng.uniform();
  for (std::size_t i = 0; i < 2 * per_class; ++i) d.labels.push_back(i % 2 ? 9 : 4);
  d.class_set = {4, 9};
  return d;
}

}  // namespace

TEST(Fisher, LogisticHandGradients) {
  // L(w) = log(1 + exp(-y w x)); at w = 0, dL/dw = -y x / 2.
  const std::vector<double> x{-0.6, 0.2}, y{1.0, 1.0};
  const double w = 0.0;
  const auto F = empirical_fisher(2, 1, [&](std::size_t i, std::vector<double>& g) {
    g[0] = -y[i] * x[i] / (1.0 + std::exp(y[i] * w * x[i]));
  });
  ASSERT_EQ(F.size(), 1u);
  EXPECT_NEAR(F[0], 0.05, 1e-15);
}

TEST(Fisher, ZeroGradientsGiveZeroFisher) {
  const auto F = empirical_fisher(5, 3, [](std::size_t, std::vector<double>& g) { std::fill(g.begin(), g.end(), 0.0); });
  EXPECT_EQ(F, std::vector<double>(3, 0.0));
}

TEST(Fisher, MatchesPerExampleGradientsOnViT) {
  ViTClassifier model(toy_vit(), 1);
  Rng init(2);
  auto theta = model.theta();
  for (double& v : theta) v += 0.3 * init.normal();
  model.set_theta(theta);
  const LabeledDataset data = toy_data(6);
  LabelMap labels;
  labels.extend(data.class_set);

  Rng rng(5);
  const FisherAnchor a = estimate_fisher(model, data, labels, 100, rng, 3);
  EXPECT_EQ(a.sample_count, 12u);
  EXPECT_EQ(a.task_id, 3);
  EXPECT_EQ(a.anchor, model.theta());

  // Oracle: mean of squared single-example gradients over the whole set.
  std::vector<double> oracle(model.num_parameters(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Batch one = gather(data, std::span<const std::size_t>(&i, 1));
    model.params().zero_grad();
    classification_loss(model.forward(one.images), labels.to_head(one.labels), HeadKind::softmax).backward();
    const auto g = model.params().flat_grad();
    for (std::size_t k = 0; k < g.size(); ++k) oracle[k] += g[k] * g[k] / data.size();
  }
  for (std::size_t k = 0; k < oracle.size(); ++k) {
    EXPECT_NEAR(a.fisher[k], oracle[k], 1e-12 * std::max(1.0, oracle[k]));
    EXPECT_GE(a.fisher[k], 0.0);
  }
}

TEST(Fisher, SamplesPerClassCapsAndWarns) {
  ViTClassifier model(toy_vit(), 1);
  const LabeledDataset data = toy_data(5);
  LabelMap labels;
  labels.extend(data.class_set);
  int warnings = 0;
  auto old = set_log_sink([&](LogLevel level, const std::string&) { warnings += level == LogLevel::warning; });
  Rng rng(1);
  EXPECT_EQ(estimate_fisher(model, data, labels, 3, rng).sample_count, 6u);
  EXPECT_EQ(warnings, 0);
  EXPECT_EQ(estimate_fisher(model, data, labels, 8, rng).sample_count, 10u);
  EXPECT_EQ(warnings, 2);
  set_log_sink(old);
}

TEST(Fisher, DoublingTheLossQuadruplesFisher) {
  ViTClassifier model(toy_vit(), 4);
  const LabeledDataset data = toy_data(4);
  LabelMap labels;
  labels.extend(data.class_set);
  auto fisher_with_scale = [&](double scale) {
    return empirical_fisher(data.size(), model.num_parameters(), [&](std::size_t i, std::vector<double>& g) {
      const Batch one = gather(data, std::span<const std::size_t>(&i, 1));
      model.params().zero_grad();
      ag::Var loss = classification_loss(model.forward(one.images), labels.to_head(one.labels), HeadKind::softmax);
      ag::scale(loss, scale).backward();
      g = model.params().flat_grad();
    });
  };
  const auto f1 = fisher_with_scale(1.0), f2 = fisher_with_scale(2.0);
  for (std::size_t k = 0; k < f1.size(); ++k) EXPECT_NEAR(f2[k], 4.0 * f1[k], 1e-12 * std::max(1.0, f1[k]));
}

TEST(Penalty, HandArithmetic) {
  AnchorSet set;
  set.add(make_anchor({1.0, 2.0}, {0.0, 0.0}));
  const std::vector<double> theta{0.5, -1.0};
  EXPECT_DOUBLE_EQ(ewc_penalty(theta, set), 2.25);
  EXPECT_EQ(ewc_gradient(theta, set), (std::vector<double>{1.0, -4.0}));
  EXPECT_DOUBLE_EQ(fisher_weighted_drift(theta, set.anchors()[0]), 2.25);

  const std::vector<double> star{0.0, 0.0};
  EXPECT_EQ(ewc_penalty(star, set), 0.0);
  EXPECT_EQ(ewc_gradient(star, set), (std::vector<double>{0.0, 0.0}));

  AnchorSet zero;
  zero.add(make_anchor({0.0, 0.0}, {3.0, 3.0}));
  EXPECT_EQ(ewc_penalty(theta, zero), 0.0);
}

TEST(Penalty, SumsAnchorsAndHonoursLatestOnly) {
  AnchorSet sum, latest(AnchorMode::latest_only);
  for (AnchorSet* s : {&sum, &latest}) {
    s->add(make_anchor({1.0}, {0.0}, 1));
    s->add(make_anchor({2.0}, {1.0}, 2));
  }
  const std::vector<double> theta{2.0};
  EXPECT_DOUBLE_EQ(ewc_penalty(theta, sum), 1.0 * 4 + 2.0 * 1);
  EXPECT_DOUBLE_EQ(ewc_penalty(theta, latest), 2.0);
  EXPECT_EQ(latest.size(), 1u);
}

TEST(Penalty, HeadGrowthAndDimensionErrors) {
  AnchorSet set;
  set.add(make_anchor({1.0, 1.0}, {0.0, 0.0}));
  // Coordinates added after anchoring carry no importance.
  EXPECT_DOUBLE_EQ(ewc_penalty(std::vector<double>{1.0, 1.0, 50.0}, set), 2.0);
  EXPECT_EQ(ewc_gradient(std::vector<double>{1.0, 1.0, 50.0}, set)[2], 0.0);
  EXPECT_THROW(ewc_penalty(std::vector<double>{1.0}, set), ContractError);
}

TEST(Penalty, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  AnchorSet set;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> f(20), a(20);
    for (auto& v : f) v = std::abs(rng.normal());
    for (auto& v : a) v = rng.normal();
    set.add(make_anchor(f, a, k + 1));
  }
  std::vector<double> theta(20);
  for (auto& v : theta) v = rng.normal();
  const auto g = ewc_gradient(theta, set);
  // The penalty is exactly quadratic, so central differences carry no
  // truncation error; a large step keeps cancellation error negligible.
  const double h = 1e-3;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto p = theta, m = theta;
    p[i] += h;
    m[i] -= h;
    const double numeric = (ewc_penalty(p, set) - ewc_penalty(m, set)) / (2 * h);
    EXPECT_LT(std::abs(numeric - g[i]) / std::max(std::abs(g[i]), 1e-12), 1e-8) << i;
  }
  std::vector<double> acc(20, 1.0);
  add_ewc_gradient(theta, set, 0.5, acc);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(acc[i], 1.0 + 0.5 * g[i]);
}

TEST(Penalty, LargerLambdaRestrainsMore) {
  // New-task loss (t1 - 2)^2 + 3 (t2 + 1)^2 against an anchor at the origin.
  AnchorSet set;
  set.add(make_anchor({1.0, 0.5}, {0.0, 0.0}));
  double previous = INFINITY;
  for (double lambda : {10.0, 50.0, 100.0}) {
    std::vector<double> theta{0.0, 0.0};
    for (int it = 0; it < 20000; ++it) {
      std::vector<double> g{2 * (theta[0] - 2), 6 * (theta[1] + 1)};
      add_ewc_gradient(theta, set, lambda, g);
      for (int i = 0; i < 2; ++i) theta[i] -= 0.004 * g[i];
    }
    // Stationary point: a_i c_i / (a_i + lambda F_i).
    EXPECT_NEAR(theta[0], 2.0 / (1 + lambda), 1e-9);
    EXPECT_NEAR(theta[1], -3.0 / (3 + 0.5 * lambda), 1e-9);
    const double dist = std::hypot(theta[0], theta[1]);
    EXPECT_LE(dist, previous);
    previous = dist;
  }
}

TEST(Penalty, SummaryStatistics) {
  const auto s = summarize(make_anchor({0.0, 1.0, 3.0, 0.0}, {0, 0, 0, 0}));
  EXPECT_EQ(s.min, 0.0);
  EXPECT_EQ(s.max, 3.0);
  EXPECT_EQ(s.mean, 1.0);
  EXPECT_EQ(s.sparsity, 0.5);
}
