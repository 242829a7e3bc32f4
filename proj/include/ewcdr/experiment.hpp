#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ewcdr/continual_trainer.hpp"
#include "ewcdr/errors.hpp"

namespace ewcdr {

// Part of every run id, so results from an older build are never mistaken
// for current ones.
inline constexpr const char* kCodeVersion = "ewcdr-0.3";

// Records that cannot share one aggregate row.
class GroupingError : public Error {
 public:
  using Error::Error;
};

// Experiment configuration as a JSON tree. The file format is YAML; every
// key has a default (see default_experiment_config and the README schema).
//
//   stream:       dataset, num_tasks, classes_per_task, image_size, order,
//                 low_shot_fraction, train/val/test_per_class, noise_stddev
//   vit:          preset plus optional patch_size, depth, heads, hidden_dim,
//                 mlp_dim, head_kind
//   train:        method, lambda, replay_ratio, samples_per_task, epochs,
//                 lr, weight_decay, batch_size, fisher_samples_per_class,
//                 anchor_mode, fisher_timing, replay_budget_mb, measure_fwt
//   ddpm:         schedule, timesteps, epochs, widths, time_dim, mode,
//                 batch_size, lr
//   diagnostics:  enabled, knn_k, feature_source, replay_samples_per_task,
//                 loss_cap
//   sweeps:       lists for method, lambda, budget_mb, timesteps, schedule,
//                 order, low_shot
//   seeds:        list of integers
//   output_dir:   results root (EWCDR_OUTPUT_DIR when absent)
nlohmann::json default_experiment_config();

// Merges a YAML file over the defaults and validates the result.
nlohmann::json load_experiment_config(const std::filesystem::path& path);
nlohmann::json parse_experiment_config(const std::string& yaml_text);

// "train.lambda=50": the value is read as a YAML scalar or flow sequence.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Throws ConfigError naming the offending key path.
void validate_experiment_config(const nlohmann::json& config);

// Sweep axis name -> the config key it sets.
const std::vector<std::pair<std::string, std::string>>& sweep_axes();

struct RunPoint {
  nlohmann::json config;  // resolved: no sweeps, seeds or output_dir
  std::uint64_t seed = 0;
  std::string id;
};

// Cartesian product of the sweep axes (in sweep_axes() order) times seeds.
std::vector<RunPoint> expand_runs(const nlohmann::json& config);

std::string run_id(const nlohmann::json& point_config, std::uint64_t seed);
StreamConfig make_stream_config(const nlohmann::json& point_config, std::uint64_t seed);
RunConfig make_run_config(const nlohmann::json& point_config, std::uint64_t seed);

// Output root: the config's output_dir, else EWCDR_OUTPUT_DIR, else "results".
std::filesystem::path resolve_output_dir(const nlohmann::json& config);

struct ExecuteOptions {
  bool force = false;
  bool save_checkpoints = false;
};

struct RunStatus {
  std::string id;
  std::string status;  // "ok", "skipped (exists)" or "failed"
  std::string message;
  std::optional<nlohmann::json> metrics;
};

// Runs one point and writes runs/<id>/{record.json, timing.json,
// accuracy.csv, bound_terms.csv, buffer.bin, status.json, plots/}.
// Failures are caught and recorded in status.json.
RunStatus execute_run(const RunPoint& point, const std::filesystem::path& root, const ExecuteOptions& options,
                      GeneratorCache* cache);

std::filesystem::path run_directory(const std::filesystem::path& root, const std::string& id);

struct StoredRun {
  std::string id;
  RunRecord record;
};

// Every completed run under root/runs, sorted by id.
std::vector<StoredRun> load_runs(const std::filesystem::path& root);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for one value
  std::size_t n = 0;
};
Stat summarize(const std::vector<double>& values);

struct RunGroup {
  nlohmann::json config;  // shared point config
  std::vector<const StoredRun*> runs;
  std::string label;  // values of the keys that vary between groups
};

// Groups runs by point config. Throws GroupingError when a group mixes code
// versions or holds the same seed twice.
std::vector<RunGroup> group_runs(const std::vector<StoredRun>& runs);

// Dotted keys whose value differs between groups.
std::vector<std::string> varying_keys(const std::vector<RunGroup>& groups);

// JSON summary and Markdown tables: overview (Acc, F, AUC), task-wise
// (T_1, T_mid, T_n), transfer (FWT, BWT), ablation tables for groups that
// differ only in method, one table per swept axis, and the bound regression.
nlohmann::json report_json(const std::vector<StoredRun>& runs);
std::string report_markdown(const std::vector<StoredRun>& runs);

// Dotted-path lookup, e.g. "train.lambda".
const nlohmann::json& at_path(const nlohmann::json& j, const std::string& dotted);

}  // namespace ewcdr
