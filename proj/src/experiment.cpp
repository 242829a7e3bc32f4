#include "ewcdr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "ewcdr/fsutil.hpp"
#include "ewcdr/hashing.hpp"
#include "ewcdr/plots.hpp"

namespace ewcdr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      json out = json::array();
      for (const auto& item : node) out.push_back(yaml_to_json(item));
      return out;
    }
    case YAML::NodeType::Map: {
      json out = json::object();
      for (const auto& kv : node) out[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return out;
    }
    case YAML::NodeType::Scalar:
      break;
  }
  const std::string text = node.Scalar();
  if (node.Tag() == "!") return text;  // quoted
  if (text == "~" || text == "null") return nullptr;
  if (text == "true" || text == "True") return true;
  if (text == "false" || text == "False") return false;
  // Integers first so "100" stays an integer.
  {
    std::int64_t v = 0;
    std::istringstream in(text);
    if (in >> v && in.eof()) return v;
  }
  {
    double v = 0.0;
    std::istringstream in(text);
    if (in >> v && in.eof()) return v;
  }
  return text;
}

json parse_yaml(const std::string& text, const std::string& where) {
  try {
    return yaml_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::vector<std::string> split_path(const std::string& dotted) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(dotted);
  while (std::getline(in, part, '.')) {
    if (part.empty()) throw ConfigError("malformed key path '" + dotted + "'");
    parts.push_back(part);
  }
  if (parts.empty()) throw ConfigError("empty key path");
  return parts;
}

// Keys whose default is null but which accept a value.
const std::map<std::string, std::string>& nullable_kinds() {
  static const std::map<std::string, std::string> kinds = {
      {"vit.patch_size", "integer"}, {"vit.depth", "integer"},    {"vit.heads", "integer"},
      {"vit.hidden_dim", "integer"}, {"vit.mlp_dim", "integer"},  {"vit.head_kind", "string"},
      {"output_dir", "string"},      {"train.replay_budget_mb", "number"}};
  return kinds;
}

bool same_kind(const json& def, const json& value) {
  if (def.is_number()) return value.is_number();
  if (def.is_boolean()) return value.is_boolean();
  if (def.is_string()) return value.is_string();
  if (def.is_array()) return value.is_array();
  if (def.is_object()) return value.is_object();
  return true;
}

bool matches_kind(const std::string& kind, const json& value) {
  if (value.is_null()) return true;
  if (kind == "integer") return value.is_number_integer();
  if (kind == "number") return value.is_number();
  return value.is_string();
}

// Checks that `user` only uses known keys with the right kinds of values.
void check_keys(const json& user, const json& defaults, const std::string& prefix) {
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (path == "sweeps") {
      if (!value.is_object()) throw ConfigError("sweeps: expected a mapping");
      continue;
    }
    if (!defaults.contains(key)) throw ConfigError(path + ": unknown key");
    const json& def = defaults.at(key);
    if (value.is_null() && nullable_kinds().count(path)) continue;
    if (def.is_object()) {
      if (!value.is_object()) throw ConfigError(path + ": expected a mapping");
      check_keys(value, def, path);
      continue;
    }
    if (def.is_null()) {
      const auto it = nullable_kinds().find(path);
      if (it != nullable_kinds().end() && !matches_kind(it->second, value))
        throw ConfigError(path + ": expected " + it->second);
      continue;
    }
    if (path == "stream.image_size" && value.is_number_integer()) continue;
    if (!same_kind(def, value)) throw ConfigError(path + ": expected " + std::string(def.type_name()));
  }
}

template <typename F>
auto keyed(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(path, 0) == 0) throw;
    throw ConfigError(path + ": " + what);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

template <typename T>
T field(const json& config, const std::string& path) {
  return keyed(path, [&] { return at_path(config, path).get<T>(); });
}

std::size_t count_field(const json& config, const std::string& path) {
  return keyed(path, [&] {
    const json& v = at_path(config, path);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("expected a nonnegative integer");
    return static_cast<std::size_t>(v.get<std::int64_t>());
  });
}

ImageShape image_shape_field(const json& config) {
  return keyed("stream.image_size", [&] {
    const json& v = at_path(config, "stream.image_size");
    ImageShape s;
    if (v.is_number_integer()) {
      s.height = s.width = v.get<std::size_t>();
      s.channels = 1;
    } else {
      const auto dims = v.get<std::vector<std::size_t>>();
      if (dims.size() != 2 && dims.size() != 3) throw ConfigError("expected [height, width] or [height, width, channels]");
      s.height = dims[0];
      s.width = dims[1];
      s.channels = dims.size() == 3 ? dims[2] : 1;
    }
    if (s.height == 0 || s.width == 0 || s.channels == 0) throw ConfigError("dimensions must be positive");
    return s;
  });
}

json set_at_path(json config, const std::string& dotted, const json& value) {
  json* node = &config;
  for (const auto& part : split_path(dotted)) node = &(*node)[part];
  *node = value;
  return config;
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

std::string show(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  return json::parse(in);
}

int method_rank(const std::string& m) {
  static const std::vector<std::string> order = {"full", "ewc_only", "ddpm_only", "finetune", "joint"};
  const auto it = std::find(order.begin(), order.end(), m);
  return static_cast<int>(it - order.begin());
}

json without_version(json config) {
  config.erase("code_version");
  return config;
}

}  // namespace

const json& at_path(const json& j, const std::string& dotted) {
  const json* node = &j;
  for (const auto& part : split_path(dotted)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError(dotted + ": missing key");
    node = &node->at(part);
  }
  return *node;
}

json default_experiment_config() {
  return {
      {"stream",
       {{"dataset", "synthetic"},
        {"num_tasks", 3},
        {"classes_per_task", 2},
        {"image_size", {12, 12, 1}},
        {"order", "canonical"},
        {"low_shot_fraction", 1.0},
        {"train_per_class", 200},
        {"val_per_class", 40},
        {"test_per_class", 100},
        {"noise_stddev", 0.1}}},
      {"vit",
       {{"preset", "tiny"},
        {"patch_size", nullptr},
        {"depth", nullptr},
        {"heads", nullptr},
        {"hidden_dim", nullptr},
        {"mlp_dim", nullptr},
        {"head_kind", nullptr}}},
      {"train",
       {{"method", "full"},
        {"lambda", 100.0},
        {"replay_ratio", {1, 1}},
        {"samples_per_task", 256},
        {"epochs", 20},
        {"lr", 2e-3},
        {"weight_decay", 0.01},
        {"batch_size", 8},
        {"fisher_samples_per_class", 500},
        {"anchor_mode", "sum_over_tasks"},
        {"fisher_timing", "pre_task"},
        {"replay_budget_mb", 100.0},
        {"measure_fwt", false}}},
      {"ddpm",
       {{"schedule", "cosine"},
        {"timesteps", 100},
        {"epochs", 30},
        {"widths", {16, 32}},
        {"time_dim", 64},
        {"mode", "per_task"},
        {"batch_size", 32},
        {"lr", 1e-3}}},
      {"diagnostics",
       {{"enabled", true},
        {"knn_k", 5},
        {"feature_source", "cls"},
        {"replay_samples_per_task", 256},
        {"loss_cap", 10.0}}},
      {"sweeps", json::object()},
      {"seeds", {0}},
      {"output_dir", nullptr}};
}

const std::vector<std::pair<std::string, std::string>>& sweep_axes() {
  static const std::vector<std::pair<std::string, std::string>> axes = {
      {"method", "train.method"},     {"lambda", "train.lambda"},      {"budget_mb", "train.replay_budget_mb"},
      {"timesteps", "ddpm.timesteps"}, {"schedule", "ddpm.schedule"},  {"order", "stream.order"},
      {"low_shot", "stream.low_shot_fraction"}};
  return axes;
}

nlohmann::json parse_experiment_config(const std::string& yaml_text) {
  json user = parse_yaml(yaml_text, "config");
  if (user.is_null()) user = json::object();
  if (!user.is_object()) throw ConfigError("config: expected a mapping at top level");
  const json defaults = default_experiment_config();
  check_keys(user, defaults, "");
  json config = defaults;
  config.merge_patch(user);
  // merge_patch drops keys set to null; restore them.
  for (const auto& [path, kind] : nullable_kinds()) {
    (void)kind;
    const auto parts = split_path(path);
    json* node = &config;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    if (!node->contains(parts.back())) (*node)[parts.back()] = nullptr;
  }
  validate_experiment_config(config);
  return config;
}

nlohmann::json load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  const json value = parse_yaml(assignment.substr(eq + 1), key);
  const auto parts = split_path(key);
  if (parts.front() != "sweeps") {
    const json defaults = default_experiment_config();
    json probe = json::object();
    json* node = &probe;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = value;
    check_keys(probe, defaults, "");
  }
  config = set_at_path(std::move(config), key, value);
}

void validate_experiment_config(const json& config) {
  // Sweeps: known axes, nonempty lists, every value valid in place.
  const json& sweeps = at_path(config, "sweeps");
  for (const auto& [axis, values] : sweeps.items()) {
    const auto it = std::find_if(sweep_axes().begin(), sweep_axes().end(),
                                 [&](const auto& a) { return a.first == axis; });
    if (it == sweep_axes().end()) throw ConfigError("sweeps." + axis + ": unknown sweep axis");
    if (!values.is_array() || values.empty()) throw ConfigError("sweeps." + axis + ": expected a nonempty list");
  }
  const json& seeds = at_path(config, "seeds");
  if (!seeds.is_array() || seeds.empty()) throw ConfigError("seeds: expected a nonempty list");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    if (!seeds[i].is_number_integer() || seeds[i].get<std::int64_t>() < 0)
      throw ConfigError("seeds[" + std::to_string(i) + "]: expected a nonnegative integer");

  auto check_point = [](const json& point) {
    make_stream_config(point, 0).validate();
    RunConfig rc = make_run_config(point, 0);
    keyed("train", [&] { rc.train.validate(); });
    keyed("vit", [&] {
      ViTConfig v = rc.vit;
      v.image = image_shape_field(point);
      v.validate();
    });
  };
  json base = config;
  base.erase("sweeps");
  check_point(base);
  for (const auto& [axis, key] : sweep_axes()) {
    if (!sweeps.contains(axis)) continue;
    const json& values = sweeps.at(axis);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::string where = "sweeps." + axis + "[" + std::to_string(i) + "]";
      try {
        check_point(set_at_path(base, key, values[i]));
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
  }
}

std::string run_id(const json& point_config, std::uint64_t seed) {
  Fnv1a h;
  h.text(kCodeVersion).text(point_config.dump()).value(seed);
  return h.hex();
}

std::vector<RunPoint> expand_runs(const json& config) {
  validate_experiment_config(config);
  json base = config;
  const json sweeps = base.at("sweeps");
  for (const char* k : {"sweeps", "seeds", "output_dir"}) base.erase(k);
  std::vector<json> points{base};
  for (const auto& [axis, key] : sweep_axes()) {
    if (!sweeps.contains(axis)) continue;
    std::vector<json> next;
    for (const auto& p : points)
      for (const auto& v : sweeps.at(axis)) next.push_back(set_at_path(p, key, v));
    points = std::move(next);
  }
  std::vector<RunPoint> runs;
  for (const auto& p : points)
    for (const auto& s : config.at("seeds")) {
      const auto seed = s.get<std::uint64_t>();
      runs.push_back({p, seed, run_id(p, seed)});
    }
  return runs;
}

StreamConfig make_stream_config(const json& point, std::uint64_t seed) {
  StreamConfig s;
  s.dataset_name = field<std::string>(point, "stream.dataset");
  s.num_tasks = field<int>(point, "stream.num_tasks");
  s.classes_per_task = field<int>(point, "stream.classes_per_task");
  s.image_size = image_shape_field(point);
  s.order = keyed("stream.order", [&] { return parse_task_order(field<std::string>(point, "stream.order")); });
  s.low_shot_fraction = field<double>(point, "stream.low_shot_fraction");
  s.train_per_class = field<int>(point, "stream.train_per_class");
  s.val_per_class = field<int>(point, "stream.val_per_class");
  s.test_per_class = field<int>(point, "stream.test_per_class");
  s.noise_stddev = field<double>(point, "stream.noise_stddev");
  s.seed = seed;
  keyed("stream", [&] { s.validate(); });
  return s;
}

RunConfig make_run_config(const json& point, std::uint64_t seed) {
  RunConfig rc;
  rc.vit = keyed("vit.preset", [&] { return ViTConfig::preset(field<std::string>(point, "vit.preset")); });
  auto opt_size = [&](const char* key, std::size_t& target) {
    const std::string path = std::string("vit.") + key;
    if (!at_path(point, path).is_null()) target = count_field(point, path);
  };
  opt_size("patch_size", rc.vit.patch_size);
  opt_size("depth", rc.vit.depth);
  opt_size("heads", rc.vit.heads);
  opt_size("hidden_dim", rc.vit.hidden_dim);
  opt_size("mlp_dim", rc.vit.mlp_dim);
  if (const json& hk = at_path(point, "vit.head_kind"); !hk.is_null()) {
    const auto kind = hk.get<std::string>();
    if (kind == "softmax") rc.vit.head_kind = HeadKind::softmax;
    else if (kind == "sigmoid") rc.vit.head_kind = HeadKind::sigmoid;
    else throw ConfigError("vit.head_kind: expected softmax or sigmoid, got '" + kind + "'");
  }

  TrainConfig& t = rc.train;
  t.method = keyed("train.method", [&] { return parse_method(field<std::string>(point, "train.method")); });
  t.lambda = field<double>(point, "train.lambda");
  const auto ratio = field<std::vector<int>>(point, "train.replay_ratio");
  if (ratio.size() != 2) throw ConfigError("train.replay_ratio: expected [real, replay]");
  t.replay_real = ratio[0];
  t.replay_synth = ratio[1];
  t.samples_per_task = count_field(point, "train.samples_per_task");
  t.epochs_classifier = field<int>(point, "train.epochs");
  t.optimizer.lr = field<double>(point, "train.lr");
  t.optimizer.weight_decay = field<double>(point, "train.weight_decay");
  t.batch_size = count_field(point, "train.batch_size");
  t.fisher_samples_per_class = count_field(point, "train.fisher_samples_per_class");
  t.anchor_mode =
      keyed("train.anchor_mode", [&] { return parse_anchor_mode(field<std::string>(point, "train.anchor_mode")); });
  t.fisher_timing = keyed("train.fisher_timing",
                          [&] { return parse_fisher_timing(field<std::string>(point, "train.fisher_timing")); });
  if (const json& mb = at_path(point, "train.replay_budget_mb"); mb.is_null()) {
    t.replay_budget_bytes = ReplayBuffer::kUnlimited;
  } else {
    const double v = mb.get<double>();
    if (!(v >= 0.0)) throw ConfigError("train.replay_budget_mb: must be >= 0");
    t.replay_budget_bytes = static_cast<std::uint64_t>(std::llround(v * 1024.0 * 1024.0));
  }
  t.measure_fwt = field<bool>(point, "train.measure_fwt");
  t.seed = seed;

  DdpmSettings& d = rc.ddpm;
  d.schedule = keyed("ddpm.schedule", [&] { return parse_schedule_kind(field<std::string>(point, "ddpm.schedule")); });
  d.timesteps = count_field(point, "ddpm.timesteps");
  if (d.timesteps < 2) throw ConfigError("ddpm.timesteps: must be >= 2");
  d.train.epochs = field<int>(point, "ddpm.epochs");
  if (d.train.epochs < 0) throw ConfigError("ddpm.epochs: must be >= 0");
  d.widths = field<std::vector<std::size_t>>(point, "ddpm.widths");
  if (d.widths.empty()) throw ConfigError("ddpm.widths: expected a nonempty list");
  d.time_dim = count_field(point, "ddpm.time_dim");
  d.mode = keyed("ddpm.mode", [&] { return parse_generator_mode(field<std::string>(point, "ddpm.mode")); });
  d.train.batch_size = count_field(point, "ddpm.batch_size");
  if (d.train.batch_size == 0) throw ConfigError("ddpm.batch_size: must be >= 1");
  d.train.optimizer.lr = field<double>(point, "ddpm.lr");
  if (!(d.train.optimizer.lr > 0.0)) throw ConfigError("ddpm.lr: must be > 0");
  d.train.seed = seed;

  DiagnosticsConfig& g = rc.diagnostics;
  g.enabled = field<bool>(point, "diagnostics.enabled");
  g.knn_k = count_field(point, "diagnostics.knn_k");
  if (g.knn_k == 0) throw ConfigError("diagnostics.knn_k: must be >= 1");
  const auto source = field<std::string>(point, "diagnostics.feature_source");
  if (source != "cls") throw ConfigError("diagnostics.feature_source: only 'cls' is supported, got '" + source + "'");
  g.replay_samples_per_task = count_field(point, "diagnostics.replay_samples_per_task");
  g.loss_cap = field<double>(point, "diagnostics.loss_cap");

  rc.snapshot = point;
  rc.snapshot["code_version"] = kCodeVersion;
  return rc;
}

fs::path resolve_output_dir(const json& config) {
  if (config.contains("output_dir") && config.at("output_dir").is_string())
    return config.at("output_dir").get<std::string>();
  if (const char* env = std::getenv("EWCDR_OUTPUT_DIR"); env && *env) return env;
  return "results";
}

fs::path run_directory(const fs::path& root, const std::string& id) { return root / "runs" / id; }

namespace {

TaskStream build_stream(const StreamConfig& sc) {
  if (sc.dataset_name == "synthetic") return make_synthetic_stream(sc);
  return split_class_incremental(load_medmnist_file(sc.dataset_name, sc.seed), sc);
}

json brief_metrics(const RunRecord& r) {
  json auc = r.metrics.macro_auc.empty() || !r.metrics.macro_auc.back() ? json() : json(*r.metrics.macro_auc.back());
  return {{"method", to_string(r.method)},
          {"average_accuracy", r.metrics.average_accuracy},
          {"forgetting", r.metrics.forgetting.mean},
          {"auc", auc}};
}

}  // namespace

RunStatus execute_run(const RunPoint& point, const fs::path& root, const ExecuteOptions& options,
                      GeneratorCache* cache) {
  RunStatus status;
  status.id = point.id;
  const fs::path dir = run_directory(root, point.id);
  const fs::path record_path = dir / "record.json";
  if (fs::exists(record_path) && !options.force) {
    status.status = "skipped (exists)";
    try {
      status.metrics = brief_metrics(RunRecord::from_json(read_json(record_path)));
    } catch (const std::exception&) {
    }
    return status;
  }
  fs::create_directories(dir / "plots");
  fs::remove(record_path);
  write_text(dir / "config.json", json{{"config", point.config}, {"seed", point.seed}}.dump(2) + "\n");
  try {
    const StreamConfig sc = make_stream_config(point.config, point.seed);
    const RunConfig rc = make_run_config(point.config, point.seed);
    const TaskStream stream = build_stream(sc);
    ContinualTrainer trainer(stream, rc, cache);
    const RunRecord record = trainer.run();

    write_accuracy_csv(dir / "accuracy.csv", record.accuracy);
    const auto terms = record.bound_terms();
    write_bound_terms_csv(dir / "bound_terms.csv", terms);
    trainer.buffer().serialize(dir / "buffer.bin");
    write_text(dir / "timing.json", record.timing_json().dump(2) + "\n");
    write_text(dir / "plots" / "accuracy_matrix.svg", svg_accuracy_matrix(record.accuracy, to_string(record.method)));
    write_text(dir / "plots" / "loss_trace.svg", svg_loss_trace(record));
    if (options.save_checkpoints) {
      fs::create_directories(dir / "checkpoints");
      trainer.model().save(dir / "checkpoints" / "classifier.ckpt");
      for (int k = 1; k <= static_cast<int>(stream.size()); ++k) {
        std::shared_ptr<const Denoiser> g;
        try {
          g = trainer.registry().get(k);
        } catch (const Error&) {
          continue;
        }
        if (g) g->save(dir / "checkpoints" / ("generator_task" + std::to_string(k) + ".ddpm"));
      }
    }
    write_text(record_path, record.to_json().dump(2) + "\n");
    status.status = "ok";
    status.metrics = brief_metrics(record);
  } catch (const std::exception& e) {
    status.status = "failed";
    status.message = e.what();
  }
  json sj = {{"id", status.id}, {"status", status.status}, {"seed", point.seed}};
  if (!status.message.empty()) sj["error"] = status.message;
  write_text(dir / "status.json", sj.dump(2) + "\n");
  return status;
}

std::vector<StoredRun> load_runs(const fs::path& root) {
  std::vector<StoredRun> out;
  const fs::path runs = root / "runs";
  if (!fs::is_directory(runs)) return out;
  for (const auto& entry : fs::directory_iterator(runs)) {
    const fs::path record = entry.path() / "record.json";
    if (!fs::exists(record)) continue;
    try {
      out.push_back({entry.path().filename().string(), RunRecord::from_json(read_json(record))});
    } catch (const std::exception& e) {
      throw ConfigError(record.string() + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(), [](const StoredRun& a, const StoredRun& b) { return a.id < b.id; });
  return out;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::vector<RunGroup> group_runs(const std::vector<StoredRun>& runs) {
  std::map<std::string, RunGroup> by_key;
  for (const auto& run : runs) {
    const json config = without_version(run.record.config);
    auto& g = by_key[config.dump()];
    if (g.runs.empty()) g.config = config;
    g.runs.push_back(&run);
  }
  std::vector<RunGroup> groups;
  for (auto& [key, g] : by_key) {
    (void)key;
    std::set<std::uint64_t> seeds;
    std::set<std::string> versions;
    for (const auto* r : g.runs) {
      versions.insert(r->record.config.value("code_version", std::string("?")));
      if (!seeds.insert(r->record.seed).second)
        throw GroupingError("runs " + r->id + " and another share config and seed " + std::to_string(r->record.seed));
    }
    if (versions.size() > 1) {
      std::string list;
      for (const auto& v : versions) list += (list.empty() ? "" : ", ") + v;
      throw GroupingError("one configuration was run by different code versions (" + list + ")");
    }
    groups.push_back(std::move(g));
  }
  std::stable_sort(groups.begin(), groups.end(), [](const RunGroup& a, const RunGroup& b) {
    json ca = a.config, cb = b.config;
    const int ra = method_rank(ca["train"]["method"].get<std::string>());
    const int rb = method_rank(cb["train"]["method"].get<std::string>());
    ca["train"].erase("method");
    cb["train"].erase("method");
    const auto da = ca.dump(), db = cb.dump();
    return da != db ? da < db : ra < rb;
  });
  const auto keys = varying_keys(groups);
  for (auto& g : groups) {
    std::map<std::string, json> flat;
    flatten(g.config, "", flat);
    std::string label;
    for (const auto& k : keys) {
      const std::string value = flat.count(k) ? show(flat.at(k)) : "unset";
      label += (label.empty() ? "" : ", ") + (k == "train.method" ? value : k + "=" + value);
    }
    g.label = label.empty() ? g.config["train"]["method"].get<std::string>() : label;
  }
  return groups;
}

std::vector<std::string> varying_keys(const std::vector<RunGroup>& groups) {
  std::map<std::string, std::set<std::string>> values;
  std::vector<std::map<std::string, json>> flats;
  for (const auto& g : groups) {
    std::map<std::string, json> flat;
    flatten(g.config, "", flat);
    flats.push_back(std::move(flat));
  }
  std::set<std::string> all;
  for (const auto& f : flats)
    for (const auto& [k, v] : f) all.insert(k);
  std::vector<std::string> out;
  for (const auto& k : all) {
    std::set<std::string> seen;
    for (const auto& f : flats) seen.insert(f.count(k) ? f.at(k).dump() : "<unset>");
    if (seen.size() > 1) out.push_back(k);
  }
  // Method first, then the rest alphabetically.
  std::stable_partition(out.begin(), out.end(), [](const std::string& k) { return k == "train.method"; });
  return out;
}

namespace {

struct GroupStats {
  Stat acc, forgetting, auc, t1, tmid, tn, fwt, bwt;
};

GroupStats group_stats(const RunGroup& g) {
  std::vector<double> acc, f, auc, t1, tmid, tn, fwt, bwt;
  for (const auto* r : g.runs) {
    const auto& m = r->record.metrics;
    acc.push_back(m.average_accuracy);
    f.push_back(m.forgetting.mean);
    if (!m.macro_auc.empty() && m.macro_auc.back()) auc.push_back(*m.macro_auc.back());
    t1.push_back(m.taskwise.first);
    tmid.push_back(m.taskwise.mid);
    tn.push_back(m.taskwise.last);
    if (m.fwt) fwt.push_back(*m.fwt);
    if (m.bwt) bwt.push_back(*m.bwt);
  }
  return {summarize(acc), summarize(f), summarize(auc), summarize(t1),
          summarize(tmid), summarize(tn), summarize(fwt), summarize(bwt)};
}

json stat_json(const Stat& s) {
  if (s.n == 0) return nullptr;
  return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
}

std::string cell(const Stat& s, double scale, int digits) {
  if (s.n == 0) return "n/a";
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << s.mean * scale;
  if (s.n > 1) o << " ± " << std::setprecision(digits) << s.std * scale;
  return o.str();
}

std::string ablation_name(const std::string& method) {
  if (method == "full") return "Full Model (DDPM+EWC)";
  if (method == "ewc_only") return "w/o DDPM (EWC only)";
  if (method == "ddpm_only") return "w/o EWC (DDPM only)";
  if (method == "finetune") return "Fine-tuning (no DDPM, no EWC)";
  if (method == "joint") return "Joint training (upper bound)";
  return method;
}

std::vector<BoundTerms> all_bound_terms(const std::vector<StoredRun>& runs) {
  std::vector<BoundTerms> terms;
  for (const auto& r : runs)
    for (const auto& t : r.record.bound_terms()) terms.push_back(t);
  return terms;
}

// Groups that agree on everything except method, keyed by that remainder.
std::map<std::string, std::vector<const RunGroup*>> ablation_sets(const std::vector<RunGroup>& groups) {
  std::map<std::string, std::vector<const RunGroup*>> sets;
  for (const auto& g : groups) {
    json rest = g.config;
    rest["train"].erase("method");
    sets[rest.dump()].push_back(&g);
  }
  std::map<std::string, std::vector<const RunGroup*>> out;
  for (auto& [k, v] : sets)
    if (v.size() >= 2) out[k] = v;
  return out;
}

}  // namespace

json report_json(const std::vector<StoredRun>& runs) {
  if (runs.empty()) throw ConfigError("no completed runs to report");
  const auto groups = group_runs(runs);
  json out = {{"code_version", kCodeVersion}, {"varying_keys", varying_keys(groups)}};
  json gj = json::array();
  for (const auto& g : groups) {
    const auto s = group_stats(g);
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> ids;
    for (const auto* r : g.runs) {
      seeds.push_back(r->record.seed);
      ids.push_back(r->id);
    }
    gj.push_back({{"label", g.label},
                  {"method", g.config["train"]["method"]},
                  {"config", g.config},
                  {"seeds", seeds},
                  {"runs", ids},
                  {"average_accuracy", stat_json(s.acc)},
                  {"forgetting", stat_json(s.forgetting)},
                  {"auc", stat_json(s.auc)},
                  {"T1", stat_json(s.t1)},
                  {"T_mid", stat_json(s.tmid)},
                  {"T_n", stat_json(s.tn)},
                  {"fwt", stat_json(s.fwt)},
                  {"bwt", stat_json(s.bwt)}});
  }
  out["groups"] = gj;
  const auto terms = all_bound_terms(runs);
  if (terms.size() >= 4) {
    out["bound_regression"] = fit_regression(terms);
  } else {
    out["bound_regression"] = nullptr;
  }
  return out;
}

std::string report_markdown(const std::vector<StoredRun>& runs) {
  if (runs.empty()) throw ConfigError("no completed runs to report");
  const auto groups = group_runs(runs);
  std::vector<GroupStats> stats;
  for (const auto& g : groups) stats.push_back(group_stats(g));
  std::ostringstream md;
  md << "# Results\n\n" << runs.size() << " runs in " << groups.size()
     << " configurations. Cells are mean ± sample std over seeds; accuracy, forgetting and transfer in percent.\n\n";

  md << "## Continual adaptation\n\n| Run | Seeds | Acc ↑ | F ↓ | AUC ↑ |\n|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < groups.size(); ++i)
    md << "| " << groups[i].label << " | " << groups[i].runs.size() << " | " << cell(stats[i].acc, 100, 1) << " | "
       << cell(stats[i].forgetting, 100, 1) << " | " << cell(stats[i].auc, 1, 3) << " |\n";

  md << "\n## Task-wise accuracy\n\n| Run | T_1 | T_mid | T_n |\n|---|---|---|---|\n";
  for (std::size_t i = 0; i < groups.size(); ++i)
    md << "| " << groups[i].label << " | " << cell(stats[i].t1, 100, 1) << " | " << cell(stats[i].tmid, 100, 1)
       << " | " << cell(stats[i].tn, 100, 1) << " |\n";

  md << "\n## Transfer\n\n| Run | FWT | BWT |\n|---|---|---|\n";
  for (std::size_t i = 0; i < groups.size(); ++i)
    md << "| " << groups[i].label << " | " << cell(stats[i].fwt, 100, 1) << " | " << cell(stats[i].bwt, 100, 1)
       << " |\n";

  const auto sets = ablation_sets(groups);
  for (const auto& [key, members] : sets) {
    (void)key;
    md << "\n## Ablation";
    if (sets.size() > 1) {
      std::string ctx = members.front()->label;
      md << " (" << ctx.substr(ctx.find(',') == std::string::npos ? ctx.size() : ctx.find(',') + 2) << ")";
    }
    md << "\n\n| Method | Acc ↑ | F ↓ | AUC ↑ |\n|---|---|---|---|\n";
    for (const auto* g : members) {
      const auto s = group_stats(*g);
      md << "| " << ablation_name(g->config["train"]["method"].get<std::string>()) << " | " << cell(s.acc, 100, 1)
         << " | " << cell(s.forgetting, 100, 1) << " | " << cell(s.auc, 1, 3) << " |\n";
    }
  }

  // One table per swept axis: rows are the other varying keys, columns the
  // axis values, cells "Acc / F".
  const auto keys = varying_keys(groups);
  for (const auto& axis : keys) {
    if (axis == "train.method") continue;
    std::vector<std::string> columns;
    std::map<std::string, std::map<std::string, const GroupStats*>> table;
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      std::map<std::string, json> flat;
      flatten(groups[i].config, "", flat);
      const std::string col = flat.count(axis) ? show(flat.at(axis)) : "unset";
      if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
      std::string row;
      for (const auto& k : keys) {
        if (k == axis) continue;
        const std::string v = flat.count(k) ? show(flat.at(k)) : "unset";
        row += (row.empty() ? "" : ", ") + (k == "train.method" ? v : k + "=" + v);
      }
      if (row.empty()) row = "all";
      if (!table.count(row)) rows.push_back(row);
      table[row][col] = &stats[i];
    }
    md << "\n## Sweep over " << axis << " (Acc / F)\n\n| Run |";
    for (const auto& c : columns) md << " " << c << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
    md << "\n";
    for (const auto& row : rows) {
      md << "| " << row << " |";
      for (const auto& c : columns) {
        const auto it = table[row].find(c);
        if (it == table[row].end()) md << " n/a |";
        else md << " " << cell(it->second->acc, 100, 1) << " / " << cell(it->second->forgetting, 100, 1) << " |";
      }
      md << "\n";
    }
  }

  const auto terms = all_bound_terms(runs);
  md << "\n## Bound regression\n\n";
  if (terms.size() < 4) {
    md << "Fewer than four (KL, drift, forgetting) rows; no fit.\n";
  } else {
    const auto fit = fit_regression(terms);
    md << "Observed forgetting ~ a KL + b drift + c over " << fit.n << " task rows.\n\n";
    if (fit.degenerate) {
      md << "Degenerate design: " << fit.note << "\n";
    } else {
      md << std::setprecision(4) << "| a | b | c | R² joint | R² KL only | R² drift only |\n|---|---|---|---|---|---|\n| "
         << fit.a << " | " << fit.b << " | " << fit.intercept << " | " << fit.r2_joint << " | " << fit.r2_kl_only
         << " | " << fit.r2_drift_only << " |\n";
    }
  }
  return md.str();
}

}  // namespace ewcdr
