#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ewcdr/errors.hpp"
#include "ewcdr/ops.hpp"
#include "ewcdr/vit.hpp"

using namespace ewcdr;

namespace {

ViTConfig toy_config() {
  ViTConfig c;
  c.image = {4, 4, 1};
  c.patch_size = 2;
  c.depth = 1;
  c.heads = 2;
  c.hidden_dim = 4;
  c.mlp_dim = 6;
  c.num_classes = 3;
  return c;
}

Tensor random_images(std::size_t b, const ImageShape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({b, s.height, s.width, s.channels});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

// Gives every parameter (including zero-initialised ones) a generic value.
void randomize(ViTClassifier& model, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  auto theta = model.theta();
  for (double& v : theta) v += scale * rng.normal();
  model.set_theta(theta);
}

double loss_at(ViTClassifier& model, const std::vector<double>& theta, const Tensor& x, const std::vector<int>& y,
               HeadKind kind) {
  model.set_theta(theta);
  ag::NoGradGuard guard;
  return classification_loss(model.forward(x), y, kind).item();
}

void check_model_gradient(HeadKind kind) {
  ViTConfig cfg = toy_config();
  cfg.head_kind = kind;
  ViTClassifier model(cfg, 3);
  randomize(model, 4);
  const Tensor x = random_images(3, cfg.image, 5);
  const std::vector<int> y{0, 2, 1};
  model.params().zero_grad();
  classification_loss(model.forward(x), y, kind).backward();
  const auto grad = model.params().flat_grad();
  const auto theta = model.theta();
  const double eps = 1e-4;
  double worst = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto plus = theta, minus = theta;
    plus[i] += eps;
    minus[i] -= eps;
    const double numeric = (loss_at(model, plus, x, y, kind) - loss_at(model, minus, x, y, kind)) / (2 * eps);
    const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
  }
  EXPECT_LT(worst, 1e-4);
}

}  // namespace

TEST(Patchify, ShapesAndOrder) {
  Tensor img({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
  const Tensor p = patchify(img, 2);
  ASSERT_EQ(p.shape(), (Shape{4, 4}));
  // Second patch (top-right) holds pixels (0,2),(0,3),(1,2),(1,3).
  EXPECT_EQ(p[4], 2.0);
  EXPECT_EQ(p[5], 3.0);
  EXPECT_EQ(p[6], 6.0);
  EXPECT_EQ(p[7], 7.0);
}

TEST(Patchify, ConstantImageAndInverse) {
  Tensor constant({4, 4, 1}, 0.25);
  const Tensor patches = patchify(constant, 2);
  for (double v : patches.values()) EXPECT_EQ(v, 0.25);
  const Tensor img = random_images(1, {8, 8, 3}, 1).reshaped({8, 8, 3});
  EXPECT_EQ(unpatchify(patchify(img, 4), {8, 8, 3}, 4), img);
}

TEST(Patchify, RejectsIndivisibleSize) { EXPECT_THROW(patchify(Tensor({5, 4, 1}), 2), ShapeError); }

TEST(ViT, ForwardShapeDeterminismAndUniformInit) {
  const ViTConfig cfg = toy_config();
  ViTClassifier model(cfg, 1);
  Tensor x = random_images(2, cfg.image, 2);
  std::copy_n(x.data(), 16, x.data() + 16);  // duplicate first image
  const Tensor logits = model.logits(x);
  ASSERT_EQ(logits.shape(), (Shape{2, 3}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(logits[c], logits[3 + c]);
  const Tensor p = model.probabilities(x);
  for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
  EXPECT_THROW(model.logits(Tensor({1, 5, 4, 1})), ShapeError);
}

TEST(ViT, SoftmaxRowsSumToOneAndSigmoidInOpenInterval) {
  ViTConfig cfg = toy_config();
  ViTClassifier soft(cfg, 1);
  randomize(soft, 9, 1.0);
  const Tensor x = random_images(5, cfg.image, 3);
  const Tensor p = soft.probabilities(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += p[r * 3 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  cfg.head_kind = HeadKind::sigmoid;
  ViTClassifier sig(cfg, 1);
  randomize(sig, 9, 1.0);
  const Tensor q = sig.probabilities(x);
  for (double v : q.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(ViT, LossValues) {
  ag::Var uniform = ag::Var::constant(Tensor({2, 4}, 0.0));
  EXPECT_NEAR(classification_loss(uniform, {0, 3}, HeadKind::softmax).item(), std::log(4.0), 1e-12);
  Tensor confident({1, 2}, 0.0);
  confident[0] = 60.0;
  EXPECT_LT(classification_loss(ag::Var::constant(confident), {0}, HeadKind::softmax).item(), 1e-20);
  EXPECT_GE(classification_loss(ag::Var::constant(confident), {0}, HeadKind::sigmoid).item(), 0.0);
  EXPECT_THROW(classification_loss(uniform, {4, 0}, HeadKind::softmax), ContractError);
  EXPECT_THROW(classification_loss(uniform, {4, 0}, HeadKind::sigmoid), ContractError);
}

TEST(ViT, SoftmaxGradientMatchesFiniteDifferences) { check_model_gradient(HeadKind::softmax); }
TEST(ViT, SigmoidGradientMatchesFiniteDifferences) { check_model_gradient(HeadKind::sigmoid); }

TEST(ViT, ExpandHeadPreservesOldLogitsAndIndices) {
  ViTConfig cfg = toy_config();
  cfg.num_classes = 2;
  ViTClassifier once(cfg, 7), twice(cfg, 7);
  randomize(once, 8);
  twice.set_theta(once.theta());
  const auto before_map = once.params().index_map();
  const Tensor x = random_images(4, cfg.image, 6);
  const Tensor before = once.logits(x);
  const auto theta_before = once.theta();

  once.expand_head(6);
  twice.expand_head(4);
  twice.expand_head(6);
  const Tensor a = once.logits(x), b = twice.logits(x);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_EQ(a[r * 6 + c], before[r * 2 + c]);
      EXPECT_EQ(b[r * 6 + c], before[r * 2 + c]);
    }
    for (std::size_t c = 2; c < 6; ++c) EXPECT_EQ(a[r * 6 + c], 0.0);
  }
  const auto theta_after = once.theta();
  for (std::size_t i = 0; i < theta_before.size(); ++i) ASSERT_EQ(theta_after[i], theta_before[i]);
  const auto after_map = once.params().index_map();
  for (std::size_t i = 0; i + 1 < before_map.size(); ++i) {
    EXPECT_EQ(after_map[i].name, before_map[i].name);
    EXPECT_EQ(after_map[i].offset, before_map[i].offset);
  }
  EXPECT_THROW(once.expand_head(6), ContractError);
  EXPECT_THROW(once.expand_head(3), ContractError);
}

TEST(ViT, FlatIndexMapIsBijective) {
  ViTClassifier model(toy_config(), 1);
  const std::size_t d = model.num_parameters();
  std::size_t offset = 0;
  for (const auto& slot : model.params().index_map()) {
    EXPECT_EQ(slot.offset, offset);
    offset += numel(slot.shape);
  }
  EXPECT_EQ(offset, d);
  const auto last = model.params().locate(d - 1);
  EXPECT_EQ(last.name, "head.classes");
  EXPECT_THROW(model.params().locate(d), ContractError);
}

TEST(ViT, CheckpointRoundTripIsBitExact) {
  ViTConfig cfg = toy_config();
  cfg.head_kind = HeadKind::sigmoid;
  ViTClassifier model(cfg, 11);
  randomize(model, 12);
  model.expand_head(5);
  const auto path = std::filesystem::temp_directory_path() / "ewcdr_vit_roundtrip.ckpt";
  model.save(path);
  const ViTClassifier loaded = ViTClassifier::load(path);
  EXPECT_EQ(loaded.theta(), model.theta());
  EXPECT_EQ(loaded.config().num_classes, 5u);
  EXPECT_EQ(loaded.config().head_kind, HeadKind::sigmoid);
  const auto a = model.params().index_map(), b = loaded.params().index_map();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].shape, b[i].shape);
    EXPECT_EQ(a[i].offset, b[i].offset);
  }
  std::filesystem::remove(path);
}

TEST(ViT, PresetsValidate) {
  for (const char* name : {"desk", "paper", "appendix", "tiny"}) EXPECT_NO_THROW(ViTConfig::preset(name).validate());
  EXPECT_EQ(ViTConfig::paper().hidden_dim, 512u);
  EXPECT_EQ(ViTConfig::appendix().depth, 4u);
  ViTConfig bad = toy_config();
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(ViTConfig::preset("huge"), ConfigError);
}

TEST(LabelMap, OrderOfAppearance) {
  LabelMap m;
  const int first[] = {4, 5};
  const int second[] = {5, 0};
  EXPECT_EQ(m.extend(first), 2u);
  EXPECT_EQ(m.extend(second), 3u);
  EXPECT_EQ(m.head_index(0), 2);
  EXPECT_THROW(m.head_index(9), ContractError);
}
