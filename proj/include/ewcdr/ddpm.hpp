#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/nn.hpp"
#include "ewcdr/task_stream.hpp"

namespace ewcdr {

enum class ScheduleKind { linear, cosine };
std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& text);

// Timesteps are 1-based: beta(t) for t in [1, T] lives at beta[t-1].
struct DiffusionSchedule {
  ScheduleKind kind = ScheduleKind::cosine;
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
};

DiffusionSchedule build_schedule(ScheduleKind kind, std::size_t T);

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor forward_noise(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& schedule);

enum class Conditioning { class_only, class_plus_task_film };

struct DenoiserConfig {
  ImageShape image{28, 28, 1};
  std::vector<std::size_t> widths{16, 32};  // channels per resolution level
  std::size_t time_dim = 64;
  std::size_t num_classes = kSyntheticClassVocabulary;  // size of the class embedding table
  std::size_t max_tasks = 16;
  Conditioning conditioning = Conditioning::class_only;

  void validate() const;
  // Four levels, 64..512 channels.
  static DenoiserConfig paper(ImageShape image, std::size_t num_classes);
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// eps_phi(x_t, t, y[, task]) on model-space images [B,H,W,C].
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual ag::Var predict(const ag::Var& x_t, const std::vector<std::size_t>& t, const std::vector<int>& labels,
                          const std::vector<int>& tasks) const = 0;
  virtual ImageShape image_shape() const = 0;
};

// Small conditional U-Net. Timestep goes through a sinusoidal embedding and
// an MLP; class (and, in unified mode, task) embeddings are summed into it,
// and every residual block applies a FiLM scale-shift computed from the sum.
class Denoiser : public NoisePredictor {
 public:
  Denoiser(DenoiserConfig config, std::uint64_t seed);

  const DenoiserConfig& config() const noexcept { return config_; }
  nn::ParameterSet& params() noexcept { return params_; }
  const nn::ParameterSet& params() const noexcept { return params_; }

  ag::Var predict(const ag::Var& x_t, const std::vector<std::size_t>& t, const std::vector<int>& labels,
                  const std::vector<int>& tasks) const override;
  ImageShape image_shape() const override { return config_.image; }

  // Classes this generator has been trained on, with the task that
  // introduced each one.
  const std::map<int, int>& trained_classes() const noexcept { return trained_; }
  void mark_trained(int label, int task_id) { trained_[label] = task_id; }
  bool knows(int label) const { return trained_.count(label) != 0; }

  // Deep copy (parameters are not shared).
  Denoiser clone() const;

  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  Denoiser() = default;
  void build(std::uint64_t seed);
  void add_resblock(const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  ag::Var resblock(const std::string& name, const ag::Var& x, const ag::Var& emb) const;

  DenoiserConfig config_;
  nn::ParameterSet params_;
  std::map<int, int> trained_;
};

// Pixels in [0,1] are modelled on [-1,1].
Tensor to_model_space(const Tensor& images);
Tensor from_model_space(const Tensor& x);

// Loss for explicit timesteps and noise; x0 in [0,1].
ag::Var ddpm_loss_at(const NoisePredictor& model, const Tensor& x0, const std::vector<int>& labels,
                     const std::vector<int>& tasks, const std::vector<std::size_t>& t, const Tensor& eps,
                     const DiffusionSchedule& schedule);
// Draws t ~ U{1..T} and eps ~ N(0, I) per example.
ag::Var ddpm_loss(const NoisePredictor& model, const Tensor& x0, const std::vector<int>& labels,
                  const std::vector<int>& tasks, const DiffusionSchedule& schedule, Rng& rng);

struct SampleOptions {
  // Clamp the implied x0 estimate to the data range before forming the
  // posterior mean at each step.
  bool clip_denoised = true;
};

// Ancestral sampling from x_T ~ N(0, I) with reverse variance beta_t at
// every step. Images come back in [0,1], one per label. Work is split into
// chunks that each own an rng stream derived from (seed, chunk index).
Tensor sample(const NoisePredictor& model, const std::vector<int>& labels, const DiffusionSchedule& schedule,
              Rng& rng, const std::vector<int>& tasks = {}, const SampleOptions& options = {});
// Same, but rejects labels the generator was never trained on.
Tensor sample(const Denoiser& model, const std::vector<int>& labels, const DiffusionSchedule& schedule, Rng& rng,
              const SampleOptions& options = {});

struct GeneratorTrainConfig {
  int epochs = 30;
  std::size_t batch_size = 32;
  nn::AdamWConfig optimizer{1e-3, 0.0, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
};

struct GeneratorTrace {
  std::vector<double> epoch_loss;
};

// Trains on `data` (labels are global class ids). `tasks` gives a task id per
// example for unified mode; when empty every example uses `task_id`.
GeneratorTrace train_generator(Denoiser& model, const LabeledDataset& data, const DiffusionSchedule& schedule,
                               const GeneratorTrainConfig& config, int task_id,
                               const std::vector<int>& tasks = {});

void write_loss_trace_csv(const std::filesystem::path& path, const GeneratorTrace& trace);

enum class GeneratorMode { per_task, unified };
std::string to_string(GeneratorMode mode);
GeneratorMode parse_generator_mode(const std::string& text);

// Per-task generators keyed by task id, or one unified generator.
class GeneratorRegistry {
 public:
  explicit GeneratorRegistry(GeneratorMode mode) : mode_(mode) {}

  GeneratorMode mode() const noexcept { return mode_; }
  std::size_t size() const;
  void store(int task_id, std::shared_ptr<const Denoiser> generator);
  std::shared_ptr<const Denoiser> get(int task_id) const;
  std::shared_ptr<const Denoiser> unified() const { return unified_; }

  // Routes every label to the generator that learned it.
  Tensor sample(const std::vector<int>& labels, const DiffusionSchedule& schedule, Rng& rng) const;

 private:
  GeneratorMode mode_;
  std::map<int, std::shared_ptr<const Denoiser>> per_task_;
  std::shared_ptr<const Denoiser> unified_;
};

}  // namespace ewcdr
