#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ewcdr/continual_trainer.hpp"
#include "ewcdr/errors.hpp"

using namespace ewcdr;

namespace {

TaskStream tiny_stream(std::uint64_t seed = 1) {
  StreamConfig sc;
  sc.image_size = {8, 8, 1};
  sc.seed = seed;
  sc.train_per_class = 24;
  sc.val_per_class = 8;
  sc.test_per_class = 12;
  return make_synthetic_stream(sc);
}

RunConfig tiny_run(Method method) {
  RunConfig rc;
  rc.vit = ViTConfig::tiny();
  rc.vit.image = {8, 8, 1};
  rc.train.method = method;
  rc.train.epochs_classifier = 2;
  rc.train.batch_size = 16;
  rc.train.samples_per_task = 20;
  rc.train.fisher_samples_per_class = 8;
  rc.train.lambda = 50.0;
  rc.train.seed = 3;
  rc.ddpm.timesteps = 10;
  rc.ddpm.widths = {4, 8};
  rc.ddpm.time_dim = 8;
  rc.ddpm.train.epochs = 1;
  rc.ddpm.train.batch_size = 16;
  rc.diagnostics.replay_samples_per_task = 16;
  return rc;
}

LabeledDataset real_examples(std::size_t n) {
  LabeledDataset d;
  d.images = Tensor({n, 2, 2, 1}, 0.5);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 2));
  d.class_set = {0, 1};
  return d;
}

}  // namespace

TEST(MixedBatches, HalfAndHalfWithReplay) {
  ReplayBuffer buffer;
  buffer.add_task_samples(Tensor({10, 2, 2, 1}, 0.25), std::vector<int>(10, 7), 1);
  Rng rng(1);
  const auto batches = make_mixed_batches(real_examples(128), buffer, 64, 1, 1, rng);
  ASSERT_EQ(batches.size(), 4u);
  for (const auto& b : batches) {
    EXPECT_EQ(b.real_count, 32u);
    EXPECT_EQ(b.labels.size(), 64u);
    EXPECT_EQ(std::count(b.labels.begin(), b.labels.end(), 7), 32);
  }
}

TEST(MixedBatches, ThreeToOneRatio) {
  ReplayBuffer buffer;
  buffer.add_task_samples(Tensor({4, 2, 2, 1}, 0.25), {7, 8, 7, 8}, 1);
  Rng rng(2);
  const auto batches = make_mixed_batches(real_examples(96), buffer, 64, 3, 1, rng);
  ASSERT_EQ(batches.size(), 2u);
  for (const auto& b : batches) {
    EXPECT_EQ(b.real_count, 48u);
    EXPECT_EQ(b.labels.size() - b.real_count, 16u);
  }
}

TEST(MixedBatches, EmptyBufferMeansAllReal) {
  Rng rng(3);
  const auto batches = make_mixed_batches(real_examples(100), ReplayBuffer(), 64, 1, 1, rng);
  ASSERT_EQ(batches.size(), 2u);
  EXPECT_EQ(batches[0].real_count, 64u);
  EXPECT_EQ(batches[0].labels.size(), 64u);
  EXPECT_EQ(batches[1].real_count, 36u);
  EXPECT_EQ(batches[1].labels.size(), 36u);
}

TEST(TrainConfig, MethodInvariants) {
  TrainConfig c;
  c.lambda = 75.0;
  for (Method m : {Method::ddpm_only, Method::finetune, Method::joint}) {
    c.method = m;
    EXPECT_EQ(c.effective_lambda(), 0.0);
  }
  for (Method m : {Method::ewc_only, Method::finetune, Method::joint}) {
    c.method = m;
    EXPECT_FALSE(c.uses_replay());
  }
  c.method = Method::full;
  EXPECT_EQ(c.effective_lambda(), 75.0);
  EXPECT_EQ(parse_method("ddpm_only"), Method::ddpm_only);
  EXPECT_THROW(parse_method("der++"), ConfigError);
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Trainer, FullMethodStagesAndBufferContents) {
  const TaskStream stream = tiny_stream();
  ContinualTrainer trainer(stream, tiny_run(Method::full));
  EXPECT_THROW(trainer.run_task(2), ContractError);

  const TaskReport r1 = trainer.run_task(1);
  EXPECT_EQ(trainer.registry().size(), 1u);
  EXPECT_EQ(trainer.anchors().size(), 1u);
  EXPECT_TRUE(r1.replay_classes_seen.empty());
  for (const auto& s : r1.steps) EXPECT_EQ(s.penalty, 0.0);  // no earlier anchors
  EXPECT_EQ(trainer.buffer().per_class_counts(), (std::map<int, std::size_t>{{0, 10}, {1, 10}}));

  const TaskReport r2 = trainer.run_task(2);
  // Task 2 replays task 1 only.
  std::set<int> replayed;
  for (const auto& [c, n] : r2.replay_classes_seen) replayed.insert(c);
  EXPECT_EQ(replayed, (std::set<int>{0, 1}));
  EXPECT_GT(std::count_if(r2.steps.begin(), r2.steps.end(), [](const StepLog& s) { return s.penalty > 0; }), 0);

  trainer.run_task(3);
  const auto& counts = trainer.buffer().per_class_counts();
  EXPECT_EQ(counts.size(), 6u);
  for (const auto& [c, n] : counts) EXPECT_EQ(n, 10u);
  for (const auto& item : trainer.buffer().items()) EXPECT_EQ(item.provenance, Provenance::generated);
  EXPECT_EQ(trainer.registry().size(), 3u);
}

TEST(Trainer, ObjectiveDecompositionIsReAddable) {
  const TaskStream stream = tiny_stream();
  ContinualTrainer trainer(stream, tiny_run(Method::ewc_only));
  for (int k = 1; k <= 3; ++k) {
    const TaskReport r = trainer.run_task(k);
    ASSERT_FALSE(r.steps.empty());
    for (const auto& s : r.steps) EXPECT_NEAR(s.total, s.ce + r.lambda * s.penalty, 1e-6);
  }
  EXPECT_TRUE(trainer.buffer().empty());
}

TEST(Trainer, FinetuneSkipsEverythingButTraining) {
  const TaskStream stream = tiny_stream();
  ContinualTrainer trainer(stream, tiny_run(Method::finetune));
  for (int k = 1; k <= 3; ++k) {
    const TaskReport r = trainer.run_task(k);
    for (const auto& s : r.steps) EXPECT_EQ(s.penalty, 0.0);
    EXPECT_FALSE(r.fisher.has_value());
  }
  EXPECT_TRUE(trainer.buffer().empty());
  EXPECT_EQ(trainer.registry().size(), 0u);
}

TEST(Trainer, RecordShapeAndDeterminism) {
  const TaskStream stream = tiny_stream();
  GeneratorCache cache;
  const RunRecord a = run_sequence(stream, tiny_run(Method::full), &cache);
  const RunRecord b = run_sequence(stream, tiny_run(Method::full), &cache);
  const RunRecord c = run_sequence(stream, tiny_run(Method::full));  // cold cache
  EXPECT_TRUE(a.accuracy.lower_triangular_complete());
  for (int j = 1; j <= 3; ++j) {
    for (int t = j; t <= 3; ++t) EXPECT_TRUE(a.accuracy.has(j, t));
  }
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.to_json().dump(), c.to_json().dump());
  EXPECT_FALSE(a.to_json().contains("seconds"));
  EXPECT_EQ(a.diagnostics.size(), 2u);  // tasks j < K

  const RunRecord back = RunRecord::from_json(a.to_json());
  EXPECT_EQ(back.to_json().dump(), a.to_json().dump());
}

TEST(Trainer, JointFillsOnlyTheFinalColumn) {
  const TaskStream stream = tiny_stream();
  const RunRecord r = run_sequence(stream, tiny_run(Method::joint));
  for (int j = 1; j <= 3; ++j) {
    EXPECT_TRUE(r.accuracy.has(j, 3));
    for (int t = j; t < 3; ++t) EXPECT_FALSE(r.accuracy.has(j, t));
  }
  EXPECT_EQ(r.metrics.forgetting.mean, 0.0);
}

TEST(Trainer, BalancedLabels) {
  EXPECT_EQ(balanced_labels({4, 9}, 5), (std::vector<int>{4, 4, 4, 9, 9}));
  const auto l = balanced_labels({1, 2, 3}, 256);
  EXPECT_EQ(std::count(l.begin(), l.end(), 1), 86);
  EXPECT_EQ(std::count(l.begin(), l.end(), 3), 85);
}
