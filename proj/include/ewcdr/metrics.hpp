#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/tensor.hpp"

namespace ewcdr {

// A_{j,t}: accuracy on task j after training step t, 1-based, j <= t. An
// optional pre-task row holds A_{j,j-1} (task j evaluated just before it is
// trained) for forward transfer.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(int num_tasks);

  int num_tasks() const noexcept { return K_; }
  void set(int j, int t, double accuracy);
  bool has(int j, int t) const;
  double at(int j, int t) const;

  void set_pre_task(int j, double accuracy);
  bool has_pre_task(int j) const;
  double pre_task(int j) const;

  // Every entry with j <= t is defined.
  bool lower_triangular_complete() const;

  friend void to_json(nlohmann::json& j, const AccuracyMatrix& m);
  friend void from_json(const nlohmann::json& j, AccuracyMatrix& m);

 private:
  std::size_t index(int j, int t) const;

  int K_ = 0;
  std::vector<std::optional<double>> values_;
  std::vector<std::optional<double>> pre_task_;
};

struct Forgetting {
  double mean = 0.0;              // over j = 1..K-1
  std::vector<double> per_task;   // F_1..F_K (F_K is always 0)
};

// F_j = max_t A_{j,t} - A_{j,K} over the defined entries of row j.
Forgetting forgetting(const AccuracyMatrix& m);
double average_accuracy(const AccuracyMatrix& m);
double backward_transfer(const AccuracyMatrix& m);
// Requires pre-task entries for tasks 2..K; baseline[j-1] is b_j.
double forward_transfer(const AccuracyMatrix& m, std::span<const double> random_baseline);

struct Transfer {
  double fwt = 0.0;
  double bwt = 0.0;
};
Transfer transfer(const AccuracyMatrix& m, std::span<const double> random_baseline);

struct AucResult {
  double value = 0.0;
  std::vector<int> included;  // column indices that entered the average
  std::vector<int> excluded;  // columns lacking positives or negatives
};

// One-vs-rest Mann-Whitney AUC per column of scores [N, C] with ties
// credited 1/2, macro-averaged over columns that have both classes.
AucResult macro_auc(const Tensor& scores, std::span<const int> labels);

struct TaskwiseAccuracy {
  int mid_task = 0;  // ceil(K/2)
  double first = 0.0;
  double mid = 0.0;
  double last = 0.0;
};
TaskwiseAccuracy taskwise(const AccuracyMatrix& m);

struct MetricReport {
  double average_accuracy = 0.0;
  Forgetting forgetting;
  std::optional<double> fwt;
  std::optional<double> bwt;
  std::vector<std::optional<double>> macro_auc;  // one per evaluation step
  TaskwiseAccuracy taskwise;
};

// Fills what the matrix supports; FWT only when a baseline is given and
// pre-task entries exist.
MetricReport build_report(const AccuracyMatrix& m, const std::vector<std::optional<double>>& auc_per_step,
                          std::span<const double> random_baseline = {});

void to_json(nlohmann::json& j, const MetricReport& r);

}  // namespace ewcdr
