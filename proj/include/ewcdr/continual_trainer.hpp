#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/bound_diagnostics.hpp"
#include "ewcdr/ddpm.hpp"
#include "ewcdr/ewc.hpp"
#include "ewcdr/metrics.hpp"
#include "ewcdr/replay_buffer.hpp"
#include "ewcdr/task_stream.hpp"
#include "ewcdr/vit.hpp"

namespace ewcdr {

enum class Method { full, ewc_only, ddpm_only, finetune, joint };
std::string to_string(Method method);
Method parse_method(const std::string& text);

// When the task-k Fisher is measured. pre_task follows the five-stage order
// (after replay generation, before classifier training); post_task measures
// it at the parameters that are anchored.
enum class FisherTiming { pre_task, post_task };
std::string to_string(FisherTiming timing);
FisherTiming parse_fisher_timing(const std::string& text);

struct TrainConfig {
  Method method = Method::full;
  double lambda = 100.0;
  int replay_real = 1;    // real : replay items per batch
  int replay_synth = 1;
  std::size_t samples_per_task = 256;
  int epochs_classifier = 10;
  nn::AdamWConfig optimizer{};
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t fisher_samples_per_class = 500;
  AnchorMode anchor_mode = AnchorMode::sum_over_tasks;
  FisherTiming fisher_timing = FisherTiming::pre_task;
  std::uint64_t replay_budget_bytes = 100ull * 1024 * 1024;
  bool measure_fwt = false;

  bool uses_replay() const { return method == Method::full || method == Method::ddpm_only; }
  bool uses_ewc() const { return method == Method::full || method == Method::ewc_only; }
  double effective_lambda() const { return uses_ewc() ? lambda : 0.0; }
  void validate() const;
};

struct DdpmSettings {
  ScheduleKind schedule = ScheduleKind::cosine;
  std::size_t timesteps = 200;
  std::vector<std::size_t> widths{16, 32};
  std::size_t time_dim = 64;
  GeneratorMode mode = GeneratorMode::per_task;
  GeneratorTrainConfig train{};
};

struct DiagnosticsConfig {
  bool enabled = true;
  std::size_t knn_k = 5;
  std::size_t replay_samples_per_task = 256;
  double loss_cap = 10.0;  // L_max for the Pinsker monitor
};

struct RunConfig {
  ViTConfig vit{};
  DdpmSettings ddpm{};
  TrainConfig train{};
  DiagnosticsConfig diagnostics{};
  nlohmann::json snapshot;  // full experiment config, copied into the record
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void to_json(nlohmann::json& j, const DdpmSettings& c);
void to_json(nlohmann::json& j, const DiagnosticsConfig& c);

// Generators and their samples depend only on (training data, generator
// settings, seed), so runs that differ in method, lambda or budget share
// them. Entries live in memory and, when a directory is given, on disk.
class GeneratorCache {
 public:
  explicit GeneratorCache(std::optional<std::filesystem::path> directory = std::nullopt);

  struct Entry {
    std::shared_ptr<const Denoiser> generator;
    GeneratorTrace trace;
  };

  std::optional<Entry> find_generator(const std::string& key);
  void put_generator(const std::string& key, const Entry& entry);
  std::optional<Tensor> find_samples(const std::string& key);
  void put_samples(const std::string& key, const Tensor& images);

  std::size_t generator_hits() const noexcept { return generator_hits_; }
  std::size_t sample_hits() const noexcept { return sample_hits_; }

 private:
  std::optional<std::filesystem::path> dir_;
  std::mutex mutex_;
  std::map<std::string, Entry> generators_;
  std::map<std::string, Tensor> samples_;
  std::size_t generator_hits_ = 0;
  std::size_t sample_hits_ = 0;
};

struct StepLog {
  double ce = 0.0;
  double penalty = 0.0;
  double total = 0.0;
};

struct TaskReport {
  int task_id = 0;
  std::vector<int> classes;
  double lambda = 0.0;
  std::vector<StepLog> steps;
  std::vector<double> epoch_val_accuracy;
  int best_epoch = 0;
  std::vector<double> ddpm_epoch_loss;
  bool generator_from_cache = false;
  std::optional<FisherSummary> fisher;
  std::size_t fisher_samples = 0;
  std::size_t buffer_items = 0;
  std::uint64_t buffer_bytes = 0;
  std::map<int, std::size_t> buffer_per_class;
  std::map<int, std::size_t> replay_classes_seen;  // replay items drawn per class while training
  std::optional<double> pre_task_accuracy;  // A_{k,k-1}, with measure_fwt
  std::map<std::string, double> seconds;
};

struct TaskDiagnostics {
  int task_id = 0;
  std::optional<double> kl;
  std::optional<double> drift;
  double observed_forgetting = 0.0;
  std::optional<double> tv_weighted;
  std::optional<PinskerCheck> pinsker;
};

struct RunRecord {
  nlohmann::json config;
  std::uint64_t seed = 0;
  Method method = Method::full;
  AccuracyMatrix accuracy;
  std::vector<std::optional<double>> auc_per_step;
  std::vector<double> random_baseline;
  MetricReport metrics;
  std::vector<TaskReport> tasks;
  std::vector<TaskDiagnostics> diagnostics;
  std::map<std::string, double> seconds;  // wall clock, excluded from record.json

  // Rows with both KL and drift, for the regression.
  std::vector<BoundTerms> bound_terms() const;
  nlohmann::json to_json() const;  // deterministic: no timing
  nlohmann::json timing_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& m);

struct MixedBatch {
  Tensor images;
  std::vector<int> labels;  // global class ids
  std::size_t real_count = 0;
};

// One epoch of batches: real examples in a seeded order, each batch holding
// round(B*r/(r+s)) of them and the rest drawn class-balanced from the buffer.
// With an empty buffer the batches are all real.
std::vector<MixedBatch> make_mixed_batches(const LabeledDataset& real, const ReplayBuffer& buffer,
                                           std::size_t batch_size, int ratio_real, int ratio_replay, Rng& rng);

class ContinualTrainer {
 public:
  ContinualTrainer(const TaskStream& stream, RunConfig config, GeneratorCache* cache = nullptr);

  // Runs the five stages for task k; tasks 1..k-1 must be done.
  TaskReport run_task(int k);
  RunRecord run();

  const ViTClassifier& model() const { return model_; }
  const LabelMap& label_map() const { return labels_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const AnchorSet& anchors() const { return anchors_; }
  const GeneratorRegistry& registry() const { return registry_; }
  int tasks_done() const noexcept { return done_; }

  // Accuracy on a dataset over the current head.
  double accuracy(const LabeledDataset& data) const;

 private:
  std::shared_ptr<const Denoiser> obtain_generator(int k, TaskReport& report);
  Tensor obtain_samples(const std::string& generator_key, const Denoiser& generator, const std::vector<int>& labels,
                        std::uint64_t tag);
  void train_classifier(const LabeledDataset& train, const LabeledDataset& val, const ReplayBuffer& replay,
                        int epochs, int task_id, TaskReport& report);
  void evaluate_after(int t, RunRecord& record) const;
  std::vector<TaskDiagnostics> diagnose(const RunRecord& record);
  RunRecord run_joint();

  const TaskStream& stream_;
  RunConfig config_;
  GeneratorCache* cache_;
  GeneratorCache own_cache_;
  DiffusionSchedule schedule_;
  ViTClassifier model_;
  LabelMap labels_;
  GeneratorRegistry registry_;
  std::map<int, std::string> generator_keys_;
  ReplayBuffer buffer_;
  AnchorSet anchors_;
  std::map<int, FisherAnchor> task_anchor_;
  int done_ = 0;
};

RunRecord run_sequence(const TaskStream& stream, const RunConfig& config, GeneratorCache* cache = nullptr);

// Class-balanced label list: n/|C| per class, remainder to the first classes.
std::vector<int> balanced_labels(const std::vector<int>& classes, std::size_t n);

}  // namespace ewcdr
