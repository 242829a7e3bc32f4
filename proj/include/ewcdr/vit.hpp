#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/nn.hpp"
#include "ewcdr/task_stream.hpp"

namespace ewcdr {

enum class HeadKind { softmax, sigmoid };

struct ViTConfig {
  ImageShape image{28, 28, 1};
  std::size_t patch_size = 4;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t hidden_dim = 128;
  std::size_t mlp_dim = 256;
  std::size_t num_classes = 1;
  HeadKind head_kind = HeadKind::softmax;

  std::size_t num_patches() const { return (image.height / patch_size) * (image.width / patch_size); }
  std::size_t tokens() const { return num_patches() + 1; }
  void validate() const;

  // 28x28 default used for desk-scale runs.
  static ViTConfig desk();
  // 224x224, patch 16, 6 layers, 8 heads, width 512.
  static ViTConfig paper();
  // 4 blocks, hidden 256.
  static ViTConfig appendix();
  // Small enough for unit tests and multi-seed sweeps on one CPU core.
  static ViTConfig tiny();
  static ViTConfig preset(const std::string& name);
};

void to_json(nlohmann::json& j, const ViTConfig& c);
void from_json(const nlohmann::json& j, ViTConfig& c);

// [H, W, C] (or [B, H, W, C]) -> [N, P*P*C] (or [B*N, P*P*C]); patches in
// row-major grid order, each patch flattened row-major over (py, px, c).
Tensor patchify(const Tensor& images, std::size_t patch);
Tensor unpatchify(const Tensor& patches, const ImageShape& image, std::size_t patch);

// Compact ViT f_theta: patch embedding + CLS token + learned positions,
// pre-norm transformer blocks, and an MLP head on the final CLS token.
// The class head is the last parameter, one row per class, so growing it
// never moves an existing flat index.
class ViTClassifier {
 public:
  ViTClassifier(ViTConfig config, std::uint64_t seed);

  const ViTConfig& config() const noexcept { return config_; }
  nn::ParameterSet& params() noexcept { return params_; }
  const nn::ParameterSet& params() const noexcept { return params_; }
  std::size_t num_parameters() const { return params_.flat_size(); }
  std::vector<double> theta() const { return params_.flatten(); }
  void set_theta(std::span<const double> theta) { params_.assign(theta); }

  // Penultimate representation (input to the class rows), [B, hidden].
  ag::Var features(const Tensor& images) const;
  ag::Var forward(const Tensor& images) const;

  // Gradient-free helpers.
  Tensor logits(const Tensor& images) const;
  Tensor probabilities(const Tensor& images) const;
  Tensor embed(const Tensor& images) const;

  // Appends zero-initialised class rows; earlier rows and backbone untouched.
  void expand_head(std::size_t new_num_classes);

  void save(const std::filesystem::path& path) const;
  static ViTClassifier load(const std::filesystem::path& path);

 private:
  ViTClassifier() = default;
  void build(std::uint64_t seed);
  void check_input(const Tensor& images) const;

  ViTConfig config_;
  nn::ParameterSet params_;
};

// Global class id -> head row, in order of first appearance.
class LabelMap {
 public:
  std::size_t size() const noexcept { return classes_.size(); }
  const std::vector<int>& classes() const noexcept { return classes_; }
  bool contains(int cls) const;
  // Adds unseen classes; returns the new size.
  std::size_t extend(std::span<const int> classes);
  int head_index(int cls) const;
  std::vector<int> to_head(std::span<const int> labels) const;

 private:
  std::vector<int> classes_;
};

// Mean cross-entropy (softmax) or mean per-class binary cross-entropy
// (sigmoid, one-hot targets). Labels index head rows.
ag::Var classification_loss(const ag::Var& logits, const std::vector<int>& labels, HeadKind kind);
// Row-wise softmax or elementwise sigmoid of raw logits.
Tensor head_probabilities(const Tensor& logits, HeadKind kind);

}  // namespace ewcdr
