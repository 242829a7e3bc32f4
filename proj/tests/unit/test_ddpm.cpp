#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "ewcdr/ddpm.hpp"
#include "ewcdr/errors.hpp"

using namespace ewcdr;

namespace {

// Returns the injected noise exactly, recovering it from x_t given a known x0.
class OraclePredictor : public NoisePredictor {
 public:
  OraclePredictor(Tensor x0_model, const DiffusionSchedule& s) : x0_(std::move(x0_model)), s_(s) {}
  ag::Var predict(const ag::Var& x_t, const std::vector<std::size_t>& t, const std::vector<int>&,
                  const std::vector<int>&) const override {
    Tensor eps = x_t.value();
    const std::size_t per = eps.size() / t.size();
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const double abar = s_.alpha_bar_at(t[i / per]);
      eps[i] = (eps[i] - std::sqrt(abar) * x0_[i]) / std::sqrt(1.0 - abar);
    }
    return ag::Var::constant(eps);
  }
  ImageShape image_shape() const override { return {x0_.dim(1), x0_.dim(2), x0_.dim(3)}; }

 private:
  Tensor x0_;
  DiffusionSchedule s_;
};

class ZeroPredictor : public NoisePredictor {
 public:
  explicit ZeroPredictor(ImageShape s) : s_(s) {}
  ag::Var predict(const ag::Var& x_t, const std::vector<std::size_t>&, const std::vector<int>&,
                  const std::vector<int>&) const override {
    return ag::Var::constant(Tensor(x_t.value().shape(), 0.0));
  }
  ImageShape image_shape() const override { return s_; }

 private:
  ImageShape s_;
};

DenoiserConfig tiny_denoiser() {
  DenoiserConfig c;
  c.image = {4, 4, 1};
  c.widths = {2, 4};
  c.time_dim = 4;
  c.num_classes = 3;
  return c;
}

Tensor uniform_images(std::size_t n, ImageShape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, s.height, s.width, s.channels});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

LabeledDataset blob_dataset(std::size_t per_class, std::uint64_t seed) {
  StreamConfig sc;
  sc.image_size = {8, 8, 1};
  sc.seed = seed;
  sc.train_per_class = static_cast<int>(per_class);
  return make_synthetic_stream(sc).task(1).train;
}

}  // namespace

TEST(Schedule, LinearEndpoints) {
  const auto s = build_schedule(ScheduleKind::linear, 1000);
  EXPECT_NEAR(s.beta_at(1), 1e-4, 1e-15);
  EXPECT_NEAR(s.beta_at(1000), 2e-2, 1e-15);
  EXPECT_THROW(build_schedule(ScheduleKind::linear, 1), ConfigError);
  EXPECT_THROW(build_schedule(ScheduleKind::cosine, 0), ConfigError);
}

TEST(Schedule, AlphaBarStrictlyDecreasingOnGrid) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (std::size_t T : {100u, 250u, 500u, 1000u}) {
      const auto s = build_schedule(kind, T);
      ASSERT_EQ(s.beta.size(), T);
      for (std::size_t t = 1; t <= T; ++t) {
        EXPECT_GT(s.beta_at(t), 0.0);
        EXPECT_LT(s.beta_at(t), 1.0);
        EXPECT_DOUBLE_EQ(s.alpha_at(t), 1.0 - s.beta_at(t));
        if (t > 1) {
          EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1)) << to_string(kind) << " T=" << T << " t=" << t;
        }
      }
    }
  }
}

TEST(Schedule, CosineAlphaBarMatchesDirectProduct) {
  const std::size_t T = 100;
  const auto s = build_schedule(ScheduleKind::cosine, T);
  // Independent recomputation from the closed-form cosine curve.
  const double pi = std::acos(-1.0), off = 0.008;
  auto f = [&](double t) { return std::pow(std::cos((t / T + off) / (1 + off) * pi / 2), 2); };
  double prod = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double beta = std::clamp(1.0 - f(double(t)) / f(double(t - 1)), 1e-12, 0.999);
    prod *= 1.0 - beta;
    EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
  }
}

TEST(ForwardNoise, HandArithmeticAndLimits) {
  DiffusionSchedule s;
  s.T = 2;
  s.beta = {0.36, 0.5};
  s.alpha = {0.64, 0.5};
  s.alpha_bar = {0.64, 0.32};
  const Tensor x0({1, 2, 2, 1}, 0.5), ones({1, 2, 2, 1}, 1.0), zeros({1, 2, 2, 1}, 0.0);
  for (double v : forward_noise(x0, 1, ones, s).values()) EXPECT_NEAR(v, 1.0, 1e-15);
  const Tensor clean = forward_noise(x0, 2, zeros, s);
  for (double v : clean.values()) EXPECT_DOUBLE_EQ(v, std::sqrt(0.32) * 0.5);
  s.alpha_bar[0] = 1.0;
  EXPECT_EQ(forward_noise(x0, 1, ones, s), x0);
  EXPECT_THROW(forward_noise(x0, 0, ones, s), ContractError);
  EXPECT_THROW(forward_noise(x0, 3, ones, s), ContractError);
  EXPECT_THROW(forward_noise(x0, 1, Tensor({1, 2, 2, 2}), s), ShapeError);
}

TEST(ForwardNoise, EmpiricalVarianceMatchesSchedule) {
  Rng pick(17);
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const auto s = build_schedule(kind, 1000);
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t t = 1 + pick.uniform_index(1000);
      const std::size_t n = 10000;
      const Tensor x0({n, 1, 1, 1}, 0.3);
      Rng rng(100 + trial);
      Tensor eps({n, 1, 1, 1});
      for (double& v : eps.values()) v = rng.normal();
      const Tensor xt = forward_noise(x0, t, eps, s);
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = xt[i] - std::sqrt(s.alpha_bar_at(t)) * 0.3;
        mean += r;
        sq += r * r;
      }
      mean /= n;
      const double var = sq / n - mean * mean;
      EXPECT_NEAR(var / (1.0 - s.alpha_bar_at(t)), 1.0, 0.05) << to_string(kind) << " t=" << t;
    }
  }
}

TEST(DdpmLoss, PerfectPredictorGivesZero) {
  const auto s = build_schedule(ScheduleKind::cosine, 50);
  const Tensor x0 = uniform_images(6, {3, 3, 1}, 2);
  OraclePredictor oracle(to_model_space(x0), s);
  Rng rng(3);
  EXPECT_NEAR(ddpm_loss(oracle, x0, {0, 1, 0, 1, 0, 1}, {}, s, rng).item(), 0.0, 1e-20);
}

TEST(DdpmLoss, ZeroPredictorGivesUnitSecondMoment) {
  const auto s = build_schedule(ScheduleKind::cosine, 50);
  const Tensor x0 = uniform_images(10000, {1, 1, 1}, 2);
  ZeroPredictor zero({1, 1, 1});
  Rng rng(4);
  const double loss = ddpm_loss(zero, x0, std::vector<int>(10000, 0), {}, s, rng).item();
  EXPECT_NEAR(loss, 1.0, 0.05);
  EXPECT_GE(loss, 0.0);
}

TEST(DdpmLoss, GradientMatchesFiniteDifferences) {
  for (auto cond : {Conditioning::class_only, Conditioning::class_plus_task_film}) {
    DenoiserConfig cfg = tiny_denoiser();
    cfg.conditioning = cond;
    Denoiser model(cfg, 5);
    // Perturb everything, including the zero-initialised output conv.
    Rng rng(6);
    std::vector<double> theta = model.params().flatten();
    for (double& v : theta) v += 0.3 * rng.normal();
    model.params().assign(theta);

    const auto s = build_schedule(ScheduleKind::cosine, 20);
    const Tensor x0 = uniform_images(2, cfg.image, 7);
    Tensor eps({2, 4, 4, 1});
    for (double& v : eps.values()) v = rng.normal();
    const std::vector<int> labels{0, 2}, tasks = cond == Conditioning::class_only ? std::vector<int>{} : std::vector<int>{1, 2};
    const std::vector<std::size_t> t{3, 17};

    model.params().zero_grad();
    ddpm_loss_at(model, x0, labels, tasks, t, eps, s).backward();
    const auto grad = model.params().flat_grad();
    auto loss = [&](const std::vector<double>& th) {
      model.params().assign(th);
      ag::NoGradGuard guard;
      return ddpm_loss_at(model, x0, labels, tasks, t, eps, s).item();
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      auto plus = theta, minus = theta;
      plus[i] += h;
      minus[i] -= h;
      const double numeric = (loss(plus) - loss(minus)) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
      worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
    }
    EXPECT_LT(worst, 1e-3);
  }
}

TEST(Sample, SingleStepClosedForm) {
  const double beta = 0.3;
  DiffusionSchedule s;
  s.kind = ScheduleKind::linear;
  s.T = 1;
  s.beta = {beta};
  s.alpha = {1 - beta};
  s.alpha_bar = {1 - beta};
  ZeroPredictor zero({2, 3, 1});
  Rng rng(21);
  const Tensor out = sample(zero, {0, 0}, s, rng, {}, SampleOptions{false});

  // Replay the draws: x_1 ~ N(0, I), then one reverse step with eps_hat = 0.
  // At t = 1 the posterior mean collapses to the x0 estimate x_1 / sqrt(alpha).
  Rng replay(21);
  Rng chunk(derive_seed(replay.next_u64(), {0}));
  std::vector<double> x1(12);
  for (double& v : x1) v = chunk.normal();
  ASSERT_EQ(out.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    const double x0 = x1[i] / std::sqrt(1 - beta) + std::sqrt(beta) * chunk.normal();
    EXPECT_NEAR(out[i], std::clamp((x0 + 1.0) / 2.0, 0.0, 1.0), 1e-6);
  }
}

TEST(Sample, ShapeRangeAndDeterminism) {
  Denoiser model(tiny_denoiser(), 1);
  for (int c : {0, 1, 2}) model.mark_trained(c, 1);
  const auto s = build_schedule(ScheduleKind::cosine, 10);
  Rng a(9), b(9), c(10);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  const Tensor x = sample(model, labels, s, a);
  ASSERT_EQ(x.shape(), (Shape{8, 4, 4, 1}));
  for (double v : x.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(sample(model, labels, s, b), x);
  EXPECT_NE(sample(model, labels, s, c), x);
}

TEST(Sample, UnknownLabelIsRejected) {
  Denoiser model(tiny_denoiser(), 1);
  model.mark_trained(0, 1);
  const auto s = build_schedule(ScheduleKind::cosine, 5);
  Rng rng(1);
  EXPECT_THROW(sample(model, {0, 1}, s, rng), ContractError);

  GeneratorRegistry registry(GeneratorMode::per_task);
  registry.store(1, std::make_shared<Denoiser>(model.clone()));
  EXPECT_THROW(registry.sample({2}, s, rng), ContractError);
  EXPECT_EQ(registry.sample({0, 0}, s, rng).dim(0), 2u);
}

TEST(Generator, ZeroEpochsLeavesStateUntouched) {
  DenoiserConfig cfg = tiny_denoiser();
  cfg.image = {8, 8, 1};
  Denoiser model(cfg, 3);
  const auto before = model.params().flatten();
  GeneratorTrainConfig tc;
  tc.epochs = 0;
  const auto trace = train_generator(model, blob_dataset(8, 1), build_schedule(ScheduleKind::cosine, 20), tc, 1);
  EXPECT_TRUE(trace.epoch_loss.empty());
  EXPECT_EQ(model.params().flatten(), before);
}

TEST(Generator, ThirtyEpochsHalveTheLoss) {
  DenoiserConfig cfg;
  cfg.image = {8, 8, 1};
  cfg.widths = {8, 16};
  cfg.time_dim = 32;
  Denoiser model(cfg, 3);
  GeneratorTrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 16;
  tc.seed = 4;
  const LabeledDataset data = blob_dataset(48, 2);
  const auto trace = train_generator(model, data, build_schedule(ScheduleKind::cosine, 50), tc, 1);
  ASSERT_EQ(trace.epoch_loss.size(), 30u);
  EXPECT_LE(trace.epoch_loss.back(), 0.5 * trace.epoch_loss.front());
  for (int c : data.class_set) EXPECT_TRUE(model.knows(c));
}

TEST(Generator, RegistryBookkeeping) {
  GeneratorRegistry registry(GeneratorMode::per_task);
  for (int k = 1; k <= 3; ++k) registry.store(k, std::make_shared<Denoiser>(tiny_denoiser(), k));
  EXPECT_EQ(registry.size(), 3u);
  EXPECT_THROW(registry.get(4), ContractError);
}

TEST(Generator, CheckpointRoundTrip) {
  Denoiser model(tiny_denoiser(), 8);
  model.mark_trained(2, 1);
  const auto path = std::filesystem::temp_directory_path() / "ewcdr_denoiser.ckpt";
  model.save(path);
  const Denoiser back = Denoiser::load(path);
  EXPECT_EQ(back.params().flatten(), model.params().flatten());
  EXPECT_EQ(back.trained_classes(), model.trained_classes());
  std::filesystem::remove(path);
}

TEST(Denoiser, ConfigValidation) {
  DenoiserConfig bad = tiny_denoiser();
  bad.image = {5, 5, 1};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = tiny_denoiser();
  bad.time_dim = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_NO_THROW(DenoiserConfig::paper({64, 64, 1}, 10).validate());
}

TEST(Generator, SamplesFollowTheirConditioningClass) {
  DenoiserConfig cfg;
  cfg.image = {8, 8, 1};
  cfg.widths = {8, 16};
  cfg.time_dim = 32;
  Denoiser model(cfg, 11);
  GeneratorTrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 16;
  tc.seed = 12;
  const LabeledDataset data = blob_dataset(96, 5);
  const auto schedule = build_schedule(ScheduleKind::cosine, 50);
  train_generator(model, data, schedule, tc, 1);

  // Nearest-centroid classifier fitted on the real images.
  const std::size_t px = data.image_shape().pixels();
  std::map<int, std::vector<double>> centroid;
  std::map<int, int> count;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& c = centroid[data.labels[i]];
    c.resize(px, 0.0);
    for (std::size_t p = 0; p < px; ++p) c[p] += data.image(i)[p];
    ++count[data.labels[i]];
  }
  for (auto& [label, c] : centroid) {
    for (double& v : c) v /= count[label];
  }

  std::vector<int> labels;
  for (int i = 0; i < 32; ++i) {
    for (int c : data.class_set) labels.push_back(c);
  }
  Rng rng(13);
  const Tensor generated = sample(model, labels, schedule, rng);
  int agree = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int best = -1;
    double best_d = 1e300;
    for (const auto& [label, c] : centroid) {
      double d = 0.0;
      for (std::size_t p = 0; p < px; ++p) d += std::pow(generated[i * px + p] - c[p], 2);
      if (d < best_d) best_d = d, best = label;
    }
    agree += best == labels[i];
  }
  EXPECT_GE(static_cast<double>(agree) / labels.size(), 0.7);
}
