#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include "ewcdr/bound_diagnostics.hpp"
#include "ewcdr/errors.hpp"
#include "ewcdr/rng.hpp"

using namespace ewcdr;

namespace {

Tensor gaussian(std::size_t n, std::size_t d, double mean, Rng& rng) {
  Tensor t({n, d});
  for (double& v : t.values()) v = mean + rng.normal();
  return t;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> kl_trials(std::size_t n, double shift, int trials, std::uint64_t seed) {
  std::vector<double> est;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(trial), n}));
    est.push_back(estimate_kl(gaussian(n, 1, 0.0, rng), gaussian(n, 1, shift, rng), 5));
  }
  return est;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::vector<BoundTerms> planted_terms(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<BoundTerms> terms;
  for (std::size_t i = 0; i < n; ++i) {
    BoundTerms t;
    t.task_id = static_cast<int>(i + 1);
    t.kl_estimate = rng.uniform(0.0, 2.0);
    t.drift = rng.uniform(0.0, 1.0);
    t.observed_forgetting = 0.3 * t.kl_estimate + 0.7 * t.drift + 1e-2 * rng.normal();  // variance 1e-4
    terms.push_back(t);
  }
  return terms;
}

}  // namespace

TEST(KlEstimator, GaussianShiftWithinFifteenPercent) {
  const auto start = std::chrono::steady_clock::now();
  const double est = median(kl_trials(5000, 1.0, 20, 1));
  EXPECT_NEAR(est, 0.5, 0.15 * 0.5);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 120.0);
}

TEST(KlEstimator, SelfDivergenceIsSmall) {
  Rng rng(2);
  const Tensor real = gaussian(2000, 3, 0.0, rng);
  Tensor replay = real;
  for (double& v : replay.values()) v += 1e-9 * rng.normal();
  EXPECT_LT(estimate_kl(real, replay, 5), 0.05);
}

TEST(KlEstimator, FarClustersExceedTwoNats) {
  Rng rng(3);
  EXPECT_GT(estimate_kl(gaussian(500, 1, 0.0, rng), gaussian(500, 1, 10.0, rng), 5), 2.0);
}

// On matched inputs more than half of the clamped estimates are exactly zero,
// so their median carries no trend; the mean of the clamped values does.
TEST(KlEstimator, MatchedGaussiansTrendTowardZero) {
  const auto small = kl_trials(500, 0.0, 20, 4), mid = kl_trials(2000, 0.0, 20, 4), large = kl_trials(5000, 0.0, 20, 4);
  EXPECT_LT(median(large), 0.05);
  const double a = mean(small), b = mean(mid), c = mean(large);
  EXPECT_GE(a, b);
  EXPECT_GE(b, c);
  EXPECT_LT(c, 0.05);
}

TEST(KlEstimator, RequiresMoreThanKPoints) {
  Rng rng(5);
  EXPECT_THROW(estimate_kl(gaussian(5, 1, 0, rng), gaussian(50, 1, 0, rng), 5), ContractError);
  EXPECT_THROW(estimate_kl(gaussian(50, 1, 0, rng), gaussian(5, 1, 0, rng), 5), ContractError);
  EXPECT_THROW(estimate_kl(gaussian(50, 1, 0, rng), gaussian(50, 2, 0, rng), 5), ShapeError);
}

TEST(KlEstimator, LabelCoordinates) {
  Tensor f({2, 2}, std::vector<double>{3, 4, 0, 0});
  EXPECT_DOUBLE_EQ(mean_row_norm(f), 2.5);
  const std::vector<int> labels{7, 2}, classes{2, 7};
  const Tensor joint = append_label_coordinates(f, labels, classes, 2.5);
  EXPECT_EQ(joint.shape(), (Shape{2, 4}));
  EXPECT_EQ(joint[2], 0.0);
  EXPECT_EQ(joint[3], 2.5);
  EXPECT_EQ(joint[6], 2.5);
}

TEST(Drift, HandExamples) {
  FisherAnchor a;
  a.fisher = {2.0, 0.0};
  a.anchor = {0.0, 0.0};
  EXPECT_EQ(fisher_drift(std::vector<double>{0.0, 0.0}, a), 0.0);
  EXPECT_EQ(fisher_drift(std::vector<double>{1.0, 99.0}, a), 2.0);
  EXPECT_EQ(fisher_drift(std::vector<double>{3.0, 99.0}, a), 9.0 * 2.0);
  AnchorSet set;
  set.add(a);
  EXPECT_EQ(fisher_drift(std::vector<double>{1.5, -4.0}, a), ewc_penalty(std::vector<double>{1.5, -4.0}, set));
  EXPECT_THROW(fisher_drift(std::vector<double>{1.0}, a), ContractError);
}

TEST(Regression, RecoversPlantedCoefficients) {
  const auto fit = fit_regression(planted_terms(50, 6));
  ASSERT_FALSE(fit.degenerate);
  EXPECT_NEAR(fit.a, 0.3, 0.05);
  EXPECT_NEAR(fit.b, 0.7, 0.05);
  EXPECT_EQ(fit.n, 50u);
  EXPECT_GE(fit.r2_joint, std::max(fit.r2_kl_only, fit.r2_drift_only) - 1e-9);
  EXPECT_LE(fit.r2_joint, 1.0);
}

TEST(Regression, JointR2NeverBelowSinglePredictor) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<BoundTerms> terms(3 + rng.uniform_index(20));
    for (auto& t : terms) {
      t.kl_estimate = rng.uniform();
      t.drift = rng.uniform();
      t.observed_forgetting = rng.uniform();
    }
    const auto fit = fit_regression(terms);
    if (fit.degenerate) continue;
    EXPECT_GE(fit.r2_joint, std::max(fit.r2_kl_only, fit.r2_drift_only) - 1e-9);
  }
}

TEST(Regression, ConstantTargetGivesZeroR2) {
  auto terms = planted_terms(10, 9);
  for (auto& t : terms) t.observed_forgetting = 0.4;
  const auto fit = fit_regression(terms);
  EXPECT_EQ(fit.r2_joint, 0.0);
  EXPECT_EQ(fit.r2_kl_only, 0.0);
  EXPECT_EQ(fit.r2_drift_only, 0.0);
}

TEST(Regression, DuplicatedPredictorsAreDegenerate) {
  auto terms = planted_terms(10, 10);
  for (auto& t : terms) t.drift = t.kl_estimate;
  const auto fit = fit_regression(terms);
  EXPECT_TRUE(fit.degenerate);
  EXPECT_FALSE(fit.note.empty());
  EXPECT_THROW(fit_regression(std::vector<BoundTerms>(2)), ContractError);
}

TEST(Pinsker, Examples) {
  // Bernoulli losses: mean 0.5 on real data, 0.9 on replay.
  std::vector<double> real, replay;
  for (int i = 0; i < 1000; ++i) {
    real.push_back(i % 2 ? 1.0 : 0.0);
    replay.push_back(i % 10 ? 1.0 : 0.0);
  }
  const double kl = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  EXPECT_NEAR(kl, 0.3681, 1e-4);
  const auto check = pinsker_gap_check(real, replay, 1.0, kl);
  EXPECT_NEAR(check.gap, 0.4, 1e-12);
  EXPECT_NEAR(check.bound, std::sqrt(kl / 2), 1e-12);
  EXPECT_TRUE(check.holds);

  const auto same = pinsker_gap_check(real, real, 1.0, 0.0);
  EXPECT_EQ(same.gap, 0.0);
  EXPECT_TRUE(same.holds);
  EXPECT_TRUE(pinsker_gap_check(real, replay, 0.0, kl).holds);
  EXPECT_THROW(pinsker_gap_check({}, replay, 1.0, kl), ContractError);
}

TEST(Surface, ValuesAndMonotonicity) {
  const std::vector<double> delta{0.0, 0.5, 1.0}, lambda{10.0, 100.0, 1e6};
  const auto s = bound_surface(2.0, 3.0, delta, lambda);
  EXPECT_NEAR(s.at(1, 0), 1.3, 1e-15);
  EXPECT_NEAR(bound_surface(1.0, 1.0, delta, lambda).at(0, 2), 1e-6, 1e-18);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    for (std::size_t j = 0; j + 1 < lambda.size(); ++j) EXPECT_GE(s.at(i, j), s.at(i, j + 1));
  }
  for (std::size_t j = 0; j < lambda.size(); ++j) {
    for (std::size_t i = 0; i + 1 < delta.size(); ++i) EXPECT_LE(s.at(i, j), s.at(i + 1, j));
  }
  const std::vector<double> bad{10.0, 0.0};
  EXPECT_THROW(bound_surface(1.0, 1.0, delta, bad), ContractError);
}

TEST(BoundTermsCsv, RoundTrip) {
  const auto terms = planted_terms(4, 11);
  const auto path = std::filesystem::temp_directory_path() / "ewcdr_bound_terms.csv";
  write_bound_terms_csv(path, terms);
  const auto back = read_bound_terms_csv(path);
  ASSERT_EQ(back.size(), terms.size());
  for (std::size_t i = 0; i < terms.size(); ++i) {
    EXPECT_EQ(back[i].task_id, terms[i].task_id);
    EXPECT_EQ(back[i].kl_estimate, terms[i].kl_estimate);
    EXPECT_EQ(back[i].drift, terms[i].drift);
    EXPECT_EQ(back[i].observed_forgetting, terms[i].observed_forgetting);
  }
  std::filesystem::remove(path);
}
