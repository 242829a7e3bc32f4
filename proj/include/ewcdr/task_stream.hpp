#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ewcdr/tensor.hpp"

namespace ewcdr {

enum class Split { train, val, test };
enum class TaskOrder { canonical, reversed, permutation };

std::string to_string(Split split);
std::string to_string(TaskOrder order);
TaskOrder parse_task_order(const std::string& text);

struct ImageShape {
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;

  std::size_t pixels() const noexcept { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

// Images [N, H, W, C] in [0, 1] with integer labels drawn from class_set.
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  std::vector<int> class_set;  // sorted, unique
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  ImageShape image_shape() const;
  std::span<const double> image(std::size_t i) const;

  // Throws SchemaError when an invariant does not hold.
  void validate() const;
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  // Examples whose label is in `classes`, class_set narrowed accordingly.
  LabeledDataset restrict_to(std::span<const int> classes) const;
  std::vector<std::size_t> indices_of(int label) const;
};

// Builds class_set from labels.
std::vector<int> classes_of(std::span<const int> labels);
LabeledDataset concatenate(std::span<const LabeledDataset* const> parts, Split split);

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

struct StreamConfig {
  std::string dataset_name = "synthetic";  // "synthetic" or a path to a MedMNIST-style .npz
  int num_tasks = 3;
  int classes_per_task = 2;
  double low_shot_fraction = 1.0;
  std::uint64_t seed = 0;
  ImageShape image_size{};
  TaskOrder order = TaskOrder::canonical;
  // Synthetic generator sizes (per class).
  int train_per_class = 200;
  int val_per_class = 40;
  int test_per_class = 100;
  double noise_stddev = 0.1;

  void validate() const;
};

struct Task {
  int task_id = 0;  // 1-based position in the stream
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;

  const std::vector<int>& classes() const { return train.class_set; }
};

struct TaskStream {
  std::vector<Task> tasks;
  // cumulative_classes[k] = classes of tasks 1..k+1 in order of appearance.
  std::vector<std::vector<int>> cumulative_classes;
  TaskOrder order = TaskOrder::canonical;

  std::size_t size() const noexcept { return tasks.size(); }
  const Task& task(int task_id) const { return tasks.at(static_cast<std::size_t>(task_id - 1)); }
};

// Classes the synthetic generator can produce.
constexpr int kSyntheticClassVocabulary = 20;

// Reads train/val/test arrays from a MedMNIST-style archive. When both val
// arrays are absent, 10% of train is carved off deterministically instead.
DatasetSplits load_medmnist_file(const std::filesystem::path& path, std::uint64_t seed = 0);

// Parametric textures (oriented grating + class-positioned blob) with
// per-instance contrast, brightness and pixel noise.
DatasetSplits make_synthetic_splits(const StreamConfig& config);
TaskStream make_synthetic_stream(const StreamConfig& config);

// Assigns sorted classes to tasks in blocks of classes_per_task, orders the
// tasks per config.order, and applies low-shot subsampling to train.
TaskStream split_class_incremental(const DatasetSplits& data, const StreamConfig& config);

// Stratified ceil(fraction * class count) subsample, seeded.
LabeledDataset low_shot_subsample(const LabeledDataset& data, double fraction, std::uint64_t seed);
// Deterministic 10% (by default) stratified split of train into (train, val).
std::pair<LabeledDataset, LabeledDataset> carve_validation(const LabeledDataset& train, double fraction,
                                                           std::uint64_t seed);

struct Batch {
  Tensor images;  // [B, H, W, C]
  std::vector<int> labels;
};

// Index batches of one epoch: a seeded permutation cut into batch_size
// chunks, final partial chunk kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);
Batch gather(const LabeledDataset& data, std::span<const std::size_t> indices);
std::vector<Batch> batches(const LabeledDataset& data, std::size_t batch_size, std::uint64_t seed);

}  // namespace ewcdr
