#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ewcdr/rng.hpp"
#include "ewcdr/task_stream.hpp"
#include "ewcdr/vit.hpp"

namespace ewcdr {

// Diagonal Fisher F and the parameters theta* it was measured at.
struct FisherAnchor {
  std::vector<double> fisher;
  std::vector<double> anchor;
  std::size_t sample_count = 0;
  int task_id = 0;
};

enum class AnchorMode { sum_over_tasks, latest_only };
std::string to_string(AnchorMode mode);
AnchorMode parse_anchor_mode(const std::string& text);

class AnchorSet {
 public:
  explicit AnchorSet(AnchorMode mode = AnchorMode::sum_over_tasks) : mode_(mode) {}

  AnchorMode mode() const noexcept { return mode_; }
  bool empty() const noexcept { return anchors_.empty(); }
  std::size_t size() const noexcept { return anchors_.size(); }
  const std::vector<FisherAnchor>& anchors() const noexcept { return anchors_; }
  // latest_only keeps just the newest anchor.
  void add(FisherAnchor anchor);

 private:
  AnchorMode mode_;
  std::vector<FisherAnchor> anchors_;
};

// Writes the gradient of one example's loss into `grad` (already sized).
using ExampleGradient = std::function<void(std::size_t example, std::vector<double>& grad)>;

// Mean of squared per-example gradients over `count` examples.
std::vector<double> empirical_fisher(std::size_t count, std::size_t dim, const ExampleGradient& gradient);

// Empirical Fisher of the classification loss at the true labels, using up
// to samples_per_class examples of every class (all of them, with a
// warning, when a class has fewer).
FisherAnchor estimate_fisher(const ViTClassifier& model, const LabeledDataset& data, const LabelMap& labels,
                             std::size_t samples_per_class, Rng& rng, int task_id = 0);

// sum_i F_i (theta_i - theta*_i)^2. Coordinates past the anchor's length
// (head rows added later) carry F_i = 0.
double fisher_weighted_drift(std::span<const double> theta, const FisherAnchor& anchor);
double ewc_penalty(std::span<const double> theta, const AnchorSet& anchors);
std::vector<double> ewc_gradient(std::span<const double> theta, const AnchorSet& anchors);
// Adds scale * ewc_gradient into grad without allocating.
void add_ewc_gradient(std::span<const double> theta, const AnchorSet& anchors, double scale, std::span<double> grad);

struct FisherSummary {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
  double sparsity = 0.0;  // fraction of exactly-zero entries
};
FisherSummary summarize(const FisherAnchor& anchor);

}  // namespace ewcdr
