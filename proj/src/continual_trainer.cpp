#include "ewcdr/continual_trainer.hpp"
#include "ewcdr/fsutil.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ewcdr/checkpoint.hpp"
#include "ewcdr/errors.hpp"
#include "ewcdr/hashing.hpp"
#include "ewcdr/log.hpp"
#include "ewcdr/npz.hpp"

namespace ewcdr {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kTagVit = 0x5649;
constexpr std::uint64_t kTagBaseline = 0xBA5E;
constexpr std::uint64_t kTagBatches = 0xBA7C;
constexpr std::uint64_t kTagFisher = 0xF15E;
constexpr std::uint64_t kTagDdpmInit = 0xDD01;
constexpr std::uint64_t kTagDdpmTrain = 0xDD02;
constexpr std::uint64_t kTagReplay = 0x5EED;
constexpr std::uint64_t kTagDiagnostics = 0xD1A6;
constexpr std::size_t kEvalChunk = 256;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t hash_dataset(const LabeledDataset& data) {
  Fnv1a h;
  h.bytes(data.images.data(), data.images.size() * sizeof(double));
  h.bytes(data.labels.data(), data.labels.size() * sizeof(int));
  for (std::size_t d : data.images.shape()) h.value(static_cast<std::uint64_t>(d));
  return h.digest();
}

// Applies f to consecutive chunks of the dataset's images.
template <typename F>
void for_chunks(const LabeledDataset& data, F&& f) {
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    std::vector<std::size_t> idx(std::min(kEvalChunk, data.size() - start));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    f(start, gather(data, idx));
  }
}

double evaluate_accuracy(const ViTClassifier& model, const LabelMap& labels, const LabeledDataset& data,
                         std::size_t rows) {
  if (data.size() == 0) throw ContractError("accuracy on an empty dataset");
  std::size_t correct = 0;
  for_chunks(data, [&](std::size_t, const Batch& batch) {
    const Tensor logits = model.logits(batch.images);
    const std::size_t C = logits.cols();
    const std::size_t use = std::min(rows, C);
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      const double* row = logits.data() + i * C;
      const auto best = static_cast<int>(std::max_element(row, row + use) - row);
      correct += best == labels.head_index(batch.labels[i]);
    }
  });
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Tensor embed_all(const ViTClassifier& model, const Tensor& images) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  Tensor out;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t m = std::min(kEvalChunk, n - start);
    Tensor chunk({m, images.dim(1), images.dim(2), images.dim(3)});
    std::copy_n(images.data() + start * per, m * per, chunk.data());
    const Tensor f = model.embed(chunk);
    if (out.empty()) out = Tensor({n, f.cols()});
    std::copy(f.values().begin(), f.values().end(), out.data() + start * f.cols());
  }
  return out;
}

// Per-example loss at the true label, capped at L_max.
std::vector<double> example_losses(const ViTClassifier& model, const LabelMap& labels, const Tensor& images,
                                   const std::vector<int>& y, double cap) {
  std::vector<double> losses;
  const std::size_t n = images.dim(0), per = images.size() / n;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t m = std::min(kEvalChunk, n - start);
    Tensor chunk({m, images.dim(1), images.dim(2), images.dim(3)});
    std::copy_n(images.data() + start * per, m * per, chunk.data());
    const Tensor p = model.probabilities(chunk);
    for (std::size_t i = 0; i < m; ++i) {
      const double py = p[i * p.cols() + static_cast<std::size_t>(labels.head_index(y[start + i]))];
      losses.push_back(std::min(cap, -std::log(std::max(py, 1e-300))));
    }
  }
  return losses;
}

Tensor concat_images(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
  return out;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::full: return "full";
    case Method::ewc_only: return "ewc_only";
    case Method::ddpm_only: return "ddpm_only";
    case Method::finetune: return "finetune";
    case Method::joint: return "joint";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  for (Method m : {Method::full, Method::ewc_only, Method::ddpm_only, Method::finetune, Method::joint})
    if (to_string(m) == text) return m;
  throw ConfigError("unknown method '" + text + "' (expected full, ewc_only, ddpm_only, finetune or joint)");
}

std::string to_string(FisherTiming timing) { return timing == FisherTiming::pre_task ? "pre_task" : "post_task"; }

FisherTiming parse_fisher_timing(const std::string& text) {
  if (text == "pre_task") return FisherTiming::pre_task;
  if (text == "post_task") return FisherTiming::post_task;
  throw ConfigError("unknown fisher timing '" + text + "'");
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw ConfigError("train.lambda must be >= 0");
  if (replay_real < 1 || replay_synth < 0) throw ConfigError("train.replay_ratio needs real >= 1 and replay >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs_classifier < 0) throw ConfigError("train.epochs_classifier must be >= 0");
  if (fisher_samples_per_class < 1) throw ConfigError("train.fisher_samples_per_class must be >= 1");
  if (optimizer.lr <= 0.0) throw ConfigError("train.optimizer.lr must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"method", to_string(c.method)},
       {"lambda", c.lambda},
       {"effective_lambda", c.effective_lambda()},
       {"replay_ratio", {c.replay_real, c.replay_synth}},
       {"samples_per_task", c.samples_per_task},
       {"epochs_classifier", c.epochs_classifier},
       {"optimizer",
        {{"name", "adamw"},
         {"lr", c.optimizer.lr},
         {"weight_decay", c.optimizer.weight_decay},
         {"betas", {c.optimizer.beta1, c.optimizer.beta2}},
         {"eps", c.optimizer.eps}}},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"fisher_samples_per_class", c.fisher_samples_per_class},
       {"anchor_mode", to_string(c.anchor_mode)},
       {"fisher_timing", to_string(c.fisher_timing)},
       {"replay_budget_bytes", c.replay_budget_bytes},
       {"measure_fwt", c.measure_fwt}};
}

void to_json(nlohmann::json& j, const DdpmSettings& c) {
  j = {{"schedule", to_string(c.schedule)},
       {"timesteps", c.timesteps},
       {"widths", c.widths},
       {"time_dim", c.time_dim},
       {"mode", to_string(c.mode)},
       {"epochs", c.train.epochs},
       {"batch_size", c.train.batch_size},
       {"lr", c.train.optimizer.lr},
       {"weight_decay", c.train.optimizer.weight_decay}};
}

void to_json(nlohmann::json& j, const DiagnosticsConfig& c) {
  j = {{"enabled", c.enabled},
       {"knn_k", c.knn_k},
       {"replay_samples_per_task", c.replay_samples_per_task},
       {"loss_cap", c.loss_cap}};
}

// ---------------------------------------------------------------------------

GeneratorCache::GeneratorCache(std::optional<std::filesystem::path> directory) : dir_(std::move(directory)) {
  if (dir_) std::filesystem::create_directories(*dir_);
}

std::optional<GeneratorCache::Entry> GeneratorCache::find_generator(const std::string& key) {
  std::lock_guard lock(mutex_);
  if (auto it = generators_.find(key); it != generators_.end()) {
    ++generator_hits_;
    return it->second;
  }
  if (!dir_) return std::nullopt;
  const auto ckpt = *dir_ / (key + ".ddpm");
  const auto trace_path = *dir_ / (key + ".trace.json");
  if (!std::filesystem::exists(ckpt) || !std::filesystem::exists(trace_path)) return std::nullopt;
  try {
    Entry e;
    e.generator = std::make_shared<const Denoiser>(Denoiser::load(ckpt));
    std::ifstream in(trace_path);
    e.trace.epoch_loss = nlohmann::json::parse(in).at("epoch_loss").get<std::vector<double>>();
    generators_[key] = e;
    ++generator_hits_;
    return e;
  } catch (const std::exception& ex) {
    log_warning("ignoring unreadable cached generator " + key + ": " + ex.what());
    return std::nullopt;
  }
}

void GeneratorCache::put_generator(const std::string& key, const Entry& entry) {
  std::lock_guard lock(mutex_);
  generators_[key] = entry;
  if (!dir_) return;
  entry.generator->save(*dir_ / (key + ".ddpm"));
  const auto tmp = temp_sibling(*dir_ / (key + ".trace.json"));
  {
    std::ofstream out(tmp);
    out << nlohmann::json{{"epoch_loss", entry.trace.epoch_loss}}.dump();
  }
  std::filesystem::rename(tmp, *dir_ / (key + ".trace.json"));
}

std::optional<Tensor> GeneratorCache::find_samples(const std::string& key) {
  std::lock_guard lock(mutex_);
  if (auto it = samples_.find(key); it != samples_.end()) {
    ++sample_hits_;
    return it->second;
  }
  if (!dir_) return std::nullopt;
  const auto path = *dir_ / (key + ".samples.npz");
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const auto arrays = npz::read_npz(path);
    const auto& a = arrays.at("images");
    Tensor t(Shape(a.shape.begin(), a.shape.end()), a.to_double());
    samples_[key] = t;
    ++sample_hits_;
    return t;
  } catch (const std::exception& ex) {
    log_warning("ignoring unreadable cached samples " + key + ": " + ex.what());
    return std::nullopt;
  }
}

void GeneratorCache::put_samples(const std::string& key, const Tensor& images) {
  std::lock_guard lock(mutex_);
  samples_[key] = images;
  if (!dir_) return;
  npz::Array a;
  a.dtype = "<f8";
  a.shape.assign(images.shape().begin(), images.shape().end());
  a.bytes.resize(images.size() * sizeof(double));
  std::memcpy(a.bytes.data(), images.data(), a.bytes.size());
  const auto tmp = temp_sibling(*dir_ / (key + ".samples.npz"));
  npz::write_npz(tmp, {{"images", a}}, false);
  std::filesystem::rename(tmp, *dir_ / (key + ".samples.npz"));
}

// ---------------------------------------------------------------------------

std::vector<int> balanced_labels(const std::vector<int>& classes, std::size_t n) {
  if (classes.empty()) throw ContractError("balanced_labels needs at least one class");
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const std::size_t quota = n / classes.size() + (c < n % classes.size() ? 1 : 0);
    out.insert(out.end(), quota, classes[c]);
  }
  return out;
}

std::vector<MixedBatch> make_mixed_batches(const LabeledDataset& real, const ReplayBuffer& buffer,
                                           std::size_t batch_size, int ratio_real, int ratio_replay, Rng& rng) {
  if (batch_size < 1) throw ContractError("batch size must be >= 1");
  if (ratio_real < 1 || ratio_replay < 0) throw ContractError("replay ratio needs real >= 1 and replay >= 0");
  const bool mix = !buffer.empty() && ratio_replay > 0;
  std::size_t real_per = batch_size;
  if (mix) {
    const double share = static_cast<double>(batch_size) * ratio_real / (ratio_real + ratio_replay);
    real_per = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(share)), 1, batch_size);
  }
  const auto perm = rng.permutation(real.size());
  std::vector<MixedBatch> out;
  for (std::size_t start = 0; start < perm.size(); start += real_per) {
    const std::size_t m = std::min(real_per, perm.size() - start);
    const std::span<const std::size_t> idx(perm.data() + start, m);
    Batch b = gather(real, idx);
    MixedBatch mb;
    mb.real_count = m;
    mb.labels = std::move(b.labels);
    mb.images = std::move(b.images);
    if (mix) {
      const std::size_t replay_n =
          m == real_per ? batch_size - real_per
                        : static_cast<std::size_t>(std::lround(static_cast<double>(m) * ratio_replay / ratio_real));
      if (replay_n > 0) {
        ReplaySample r = buffer.sample_balanced(replay_n, rng);
        mb.images = concat_images(mb.images, r.images);
        mb.labels.insert(mb.labels.end(), r.labels.begin(), r.labels.end());
      }
    }
    out.push_back(std::move(mb));
  }
  return out;
}

// ---------------------------------------------------------------------------

ContinualTrainer::ContinualTrainer(const TaskStream& stream, RunConfig config, GeneratorCache* cache)
    : stream_(stream),
      config_(std::move(config)),
      cache_(cache ? cache : &own_cache_),
      schedule_(build_schedule(config_.ddpm.schedule, config_.ddpm.timesteps)),
      model_([&] {
        if (stream.size() == 0) throw ContractError("empty task stream");
        ViTConfig v = config_.vit;
        v.image = stream.tasks.front().train.image_shape();
        v.num_classes = stream.tasks.front().classes().size();
        return ViTClassifier(v, derive_seed(config_.train.seed, {kTagVit}));
      }()),
      registry_(config_.ddpm.mode),
      buffer_(config_.train.replay_budget_bytes),
      anchors_(config_.train.anchor_mode) {
  config_.train.validate();
}

double ContinualTrainer::accuracy(const LabeledDataset& data) const {
  return evaluate_accuracy(model_, labels_, data, labels_.size());
}

std::shared_ptr<const Denoiser> ContinualTrainer::obtain_generator(int k, TaskReport& report) {
  const Task& task = stream_.task(k);
  const auto& dd = config_.ddpm;
  int max_label = 0;
  for (const auto& t : stream_.tasks)
    for (int c : t.classes()) max_label = std::max(max_label, c);
  DenoiserConfig dc;
  dc.image = task.train.image_shape();
  dc.widths = dd.widths;
  dc.time_dim = dd.time_dim;
  dc.num_classes = static_cast<std::size_t>(std::max(max_label + 1, kSyntheticClassVocabulary));
  dc.max_tasks = std::max<std::size_t>(16, stream_.size());
  dc.conditioning = dd.mode == GeneratorMode::unified ? Conditioning::class_plus_task_film : Conditioning::class_only;

  const std::uint64_t data_hash = hash_dataset(task.train);
  Fnv1a key_hash;
  key_hash.text("ddpm-generator-v1")
      .text(nlohmann::json(dc).dump())
      .text(nlohmann::json(dd).dump())
      .value(config_.train.seed)
      .value(data_hash);
  if (dd.mode == GeneratorMode::unified) {
    key_hash.value(k);
    if (k > 1) {
      key_hash.text(generator_keys_.at(k - 1));
      key_hash.value(config_.train.samples_per_task);
    }
  }
  const std::string key = key_hash.hex();
  generator_keys_[k] = key;

  if (auto hit = cache_->find_generator(key)) {
    report.generator_from_cache = true;
    report.ddpm_epoch_loss = hit->trace.epoch_loss;
    return hit->generator;
  }

  GeneratorTrainConfig gtc = dd.train;
  gtc.seed = derive_seed(config_.train.seed, {kTagDdpmTrain, data_hash});
  GeneratorCache::Entry entry;
  if (dd.mode == GeneratorMode::per_task) {
    auto g = std::make_shared<Denoiser>(dc, derive_seed(config_.train.seed, {kTagDdpmInit, data_hash}));
    entry.trace = train_generator(*g, task.train, schedule_, gtc, k);
    entry.generator = g;
  } else {
    std::shared_ptr<Denoiser> g;
    LabeledDataset data = task.train;
    std::vector<int> tasks(data.size(), k);
    if (k == 1) {
      g = std::make_shared<Denoiser>(dc, derive_seed(config_.train.seed, {kTagDdpmInit, data_hash}));
    } else {
      // Continue the unified model on D_k mixed with its own replay of
      // every earlier class.
      const auto previous = registry_.unified();
      g = std::make_shared<Denoiser>(previous->clone());
      std::vector<int> old_classes;
      for (const auto& [label, task_id] : previous->trained_classes()) old_classes.push_back(label);
      const auto old_labels =
          balanced_labels(old_classes, config_.train.samples_per_task * static_cast<std::size_t>(k - 1));
      LabeledDataset replay;
      replay.images = obtain_samples(generator_keys_.at(k - 1), *previous, old_labels, kTagDdpmTrain);
      replay.labels = old_labels;
      replay.class_set = classes_of(old_labels);
      const LabeledDataset* parts[] = {&data, &replay};
      data = concatenate(parts, Split::train);
      for (int y : old_labels) tasks.push_back(previous->trained_classes().at(y));
    }
    entry.trace = train_generator(*g, data, schedule_, gtc, k, tasks);
    entry.generator = g;
  }
  report.ddpm_epoch_loss = entry.trace.epoch_loss;
  cache_->put_generator(key, entry);
  return entry.generator;
}

Tensor ContinualTrainer::obtain_samples(const std::string& generator_key, const Denoiser& generator,
                                        const std::vector<int>& labels, std::uint64_t tag) {
  Fnv1a h;
  h.text("ddpm-samples-v1").text(generator_key).value(tag).value(config_.train.seed);
  h.bytes(labels.data(), labels.size() * sizeof(int));
  const std::string key = generator_key + "-" + h.hex();
  if (auto hit = cache_->find_samples(key)) return *hit;
  Rng rng(derive_seed(config_.train.seed, {tag, Fnv1a().text(generator_key).digest()}));
  Tensor images = sample(generator, labels, schedule_, rng);
  cache_->put_samples(key, images);
  return images;
}

void ContinualTrainer::train_classifier(const LabeledDataset& train, const LabeledDataset& val,
                                        const ReplayBuffer& replay, int epochs, int task_id, TaskReport& report) {
  auto& params = model_.params();
  const auto& tc = config_.train;
  const double lambda = tc.effective_lambda();
  const bool penalize = lambda > 0.0 && !anchors_.empty();
  nn::AdamW opt(tc.optimizer, params.flat_size());
  std::vector<double> theta = model_.theta();
  std::vector<double> best_theta = theta;
  double best_acc = -1.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(derive_seed(tc.seed, {kTagBatches, static_cast<std::uint64_t>(task_id), static_cast<std::uint64_t>(epoch)}));
    const auto batches = make_mixed_batches(train, replay, tc.batch_size, tc.replay_real, tc.replay_synth, rng);
    for (const auto& batch : batches) {
      params.zero_grad();
      ag::Var ce = classification_loss(model_.forward(batch.images), labels_.to_head(batch.labels),
                                       model_.config().head_kind);
      ce.backward();
      std::vector<double> grad = params.flat_grad();
      StepLog log;
      log.ce = ce.item();
      if (penalize) {
        log.penalty = ewc_penalty(theta, anchors_);
        add_ewc_gradient(theta, anchors_, lambda, grad);
      }
      log.total = log.ce + lambda * log.penalty;
      if (!std::isfinite(log.total)) throw TrainingError("classifier", epoch + 1, "non-finite loss on task " + std::to_string(task_id));
      opt.step(theta, grad);
      model_.set_theta(theta);
      report.steps.push_back(log);
      for (std::size_t i = batch.real_count; i < batch.labels.size(); ++i) ++report.replay_classes_seen[batch.labels[i]];
    }
    const double acc = accuracy(val);
    report.epoch_val_accuracy.push_back(acc);
    if (acc >= best_acc) {
      best_acc = acc;
      best_theta = theta;
      report.best_epoch = epoch + 1;
    }
  }
  params.zero_grad();
  model_.set_theta(best_theta);
}

TaskReport ContinualTrainer::run_task(int k) {
  if (k != done_ + 1 || k > static_cast<int>(stream_.size())) {
    throw ContractError("run_task(" + std::to_string(k) + ") called after " + std::to_string(done_) + " tasks");
  }
  const auto& tc = config_.train;
  if (tc.method == Method::joint) throw ContractError("the joint baseline trains once on the union; use run()");
  const Task& task = stream_.task(k);
  TaskReport report;
  report.task_id = k;
  report.classes = task.classes();
  report.lambda = tc.effective_lambda();

  labels_.extend(task.classes());
  if (labels_.size() > model_.config().num_classes) model_.expand_head(labels_.size());
  if (tc.measure_fwt && k >= 2) report.pre_task_accuracy = accuracy(task.test);

  // Exemplar-free audit: only generated items may be reachable.
  for (const auto& item : buffer_.items()) {
    if (item.provenance != Provenance::generated) throw ContractError("replay buffer holds a non-generated item");
  }

  auto t0 = Clock::now();
  if (tc.uses_replay()) {
    const auto generator = obtain_generator(k, report);
    registry_.store(k, generator);
    report.seconds["ddpm"] = seconds_since(t0);
    t0 = Clock::now();
    const auto labels = balanced_labels(task.classes(), tc.samples_per_task);
    Tensor images = obtain_samples(generator_keys_.at(k), *generator, labels, kTagReplay);
    buffer_.add_task_samples(images, labels, k);
    report.seconds["generate"] = seconds_since(t0);
  }

  t0 = Clock::now();
  std::optional<FisherAnchor> fisher;
  Rng fisher_rng(derive_seed(tc.seed, {kTagFisher, static_cast<std::uint64_t>(k)}));
  if (tc.uses_ewc() && tc.fisher_timing == FisherTiming::pre_task) {
    fisher = estimate_fisher(model_, task.train, labels_, tc.fisher_samples_per_class, fisher_rng, k);
  }
  report.seconds["fisher"] = seconds_since(t0);

  t0 = Clock::now();
  const ReplayBuffer replay = tc.uses_replay() ? buffer_.only_tasks_before(k) : ReplayBuffer();
  train_classifier(task.train, task.val, replay, tc.epochs_classifier, k, report);
  report.seconds["classifier"] = seconds_since(t0);

  if (tc.uses_ewc()) {
    if (tc.fisher_timing == FisherTiming::post_task) {
      t0 = Clock::now();
      fisher = estimate_fisher(model_, task.train, labels_, tc.fisher_samples_per_class, fisher_rng, k);
      report.seconds["fisher"] += seconds_since(t0);
    }
    fisher->anchor = model_.theta();
    report.fisher = summarize(*fisher);
    report.fisher_samples = fisher->sample_count;
    task_anchor_[k] = *fisher;
    anchors_.add(std::move(*fisher));
  }
  report.buffer_items = buffer_.size();
  report.buffer_bytes = buffer_.total_bytes();
  report.buffer_per_class = buffer_.per_class_counts();
  done_ = k;
  return report;
}

void ContinualTrainer::evaluate_after(int t, RunRecord& record) const {
  std::vector<const LabeledDataset*> seen;
  for (int j = 1; j <= t; ++j) {
    const auto& test = stream_.task(j).test;
    record.accuracy.set(j, t, accuracy(test));
    seen.push_back(&test);
  }
  const LabeledDataset all = concatenate(seen, Split::test);
  Tensor scores({all.size(), labels_.size()});
  for_chunks(all, [&](std::size_t start, const Batch& batch) {
    const Tensor p = model_.probabilities(batch.images);
    std::copy(p.values().begin(), p.values().end(), scores.data() + start * labels_.size());
  });
  try {
    record.auc_per_step.push_back(macro_auc(scores, labels_.to_head(all.labels)).value);
  } catch (const ContractError&) {
    record.auc_per_step.push_back(std::nullopt);
  }
}

std::vector<TaskDiagnostics> ContinualTrainer::diagnose(const RunRecord& record) {
  std::vector<TaskDiagnostics> out;
  const int K = static_cast<int>(stream_.size());
  const auto theta = model_.theta();
  const auto& dc = config_.diagnostics;
  std::size_t total_train = 0;
  for (const auto& t : stream_.tasks) total_train += t.train.size();
  for (int j = 1; j < K; ++j) {
    const Task& task = stream_.task(j);
    TaskDiagnostics d;
    d.task_id = j;
    d.observed_forgetting = record.metrics.forgetting.per_task.at(static_cast<std::size_t>(j - 1));
    if (auto it = task_anchor_.find(j); it != task_anchor_.end()) d.drift = fisher_drift(theta, it->second);
    if (config_.train.uses_replay()) {
      const auto generator = registry_.get(j);
      const auto labels = balanced_labels(task.classes(), dc.replay_samples_per_task);
      const Tensor replay = obtain_samples(generator_keys_.at(j), *generator, labels, kTagDiagnostics);
      const Tensor real_features = embed_all(model_, task.test.images);
      const Tensor replay_features = embed_all(model_, replay);
      const double scale = mean_row_norm(real_features);
      d.kl = estimate_kl(append_label_coordinates(real_features, task.test.labels, task.classes(), scale),
                         append_label_coordinates(replay_features, labels, task.classes(), scale), dc.knn_k);
      d.tv_weighted = std::min(1.0, std::sqrt(*d.kl / 2.0)) * static_cast<double>(task.train.size()) /
                      static_cast<double>(total_train);
      d.pinsker = pinsker_gap_check(example_losses(model_, labels_, task.test.images, task.test.labels, dc.loss_cap),
                                    example_losses(model_, labels_, replay, labels, dc.loss_cap), dc.loss_cap, *d.kl);
    }
    out.push_back(d);
  }
  return out;
}

RunRecord ContinualTrainer::run_joint() {
  RunRecord record;
  const int K = static_cast<int>(stream_.size());
  record.accuracy = AccuracyMatrix(K);
  std::vector<const LabeledDataset*> train, val;
  for (const auto& t : stream_.tasks) {
    labels_.extend(t.classes());
    train.push_back(&t.train);
    val.push_back(&t.val);
  }
  if (labels_.size() > model_.config().num_classes) model_.expand_head(labels_.size());
  TaskReport report;
  report.task_id = K;
  report.classes = labels_.classes();
  const auto t0 = Clock::now();
  train_classifier(concatenate(train, Split::train), concatenate(val, Split::val), ReplayBuffer(),
                   config_.train.epochs_classifier * K, K, report);
  report.seconds["classifier"] = seconds_since(t0);
  record.tasks.push_back(report);
  for (int t = 1; t < K; ++t) record.auc_per_step.push_back(std::nullopt);
  evaluate_after(K, record);
  done_ = K;
  return record;
}

RunRecord ContinualTrainer::run() {
  if (done_ != 0) throw ContractError("run() needs a fresh trainer");
  const auto start = Clock::now();
  const auto& tc = config_.train;
  const int K = static_cast<int>(stream_.size());
  RunRecord record;
  if (tc.method == Method::joint) {
    record = run_joint();
  } else {
    record.accuracy = AccuracyMatrix(K);
    for (int k = 1; k <= K; ++k) {
      TaskReport report = run_task(k);
      if (report.pre_task_accuracy) record.accuracy.set_pre_task(k, *report.pre_task_accuracy);
      evaluate_after(k, record);
      record.tasks.push_back(std::move(report));
    }
    if (tc.measure_fwt) {
      // b_j: a freshly initialised model whose class rows are random too, so
      // ties between zero logits do not decide the baseline.
      ViTConfig v = model_.config();
      ViTClassifier fresh(v, derive_seed(tc.seed, {kTagBaseline}));
      Rng rng(derive_seed(tc.seed, {kTagBaseline, 1}));
      auto& head = fresh.params().get("head.classes").value();
      for (double& w : head.values()) w = rng.truncated_normal(0.02);
      std::size_t rows = 0;
      for (int j = 1; j <= K; ++j) {
        rows += stream_.task(j).classes().size();
        record.random_baseline.push_back(evaluate_accuracy(fresh, labels_, stream_.task(j).test, rows));
      }
    }
  }
  record.config = config_.snapshot;
  record.seed = tc.seed;
  record.method = tc.method;
  record.metrics = build_report(record.accuracy, record.auc_per_step, record.random_baseline);
  if (config_.diagnostics.enabled && tc.method != Method::joint && K >= 2) {
    const auto t0 = Clock::now();
    record.diagnostics = diagnose(record);
    record.seconds["diagnostics"] = seconds_since(t0);
  }
  record.seconds["total"] = seconds_since(start);
  return record;
}

RunRecord run_sequence(const TaskStream& stream, const RunConfig& config, GeneratorCache* cache) {
  ContinualTrainer trainer(stream, config, cache);
  return trainer.run();
}

// ---------------------------------------------------------------------------

std::vector<BoundTerms> RunRecord::bound_terms() const {
  std::vector<BoundTerms> out;
  for (const auto& d : diagnostics) {
    if (!d.kl || !d.drift) continue;
    out.push_back({d.task_id, *d.kl, *d.drift, d.observed_forgetting, d.tv_weighted.value_or(0.0)});
  }
  return out;
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json tasks_json = nlohmann::json::array();
  for (const auto& t : tasks) {
    std::vector<double> ce, pen, total;
    for (const auto& s : t.steps) {
      ce.push_back(s.ce);
      pen.push_back(s.penalty);
      total.push_back(s.total);
    }
    nlohmann::json tj = {{"task_id", t.task_id},
                         {"classes", t.classes},
                         {"lambda", t.lambda},
                         {"loss_trace", {{"ce", ce}, {"penalty", pen}, {"total", total}}},
                         {"epoch_val_accuracy", t.epoch_val_accuracy},
                         {"best_epoch", t.best_epoch},
                         {"ddpm_epoch_loss", t.ddpm_epoch_loss},
                         {"pre_task_accuracy", optional_json(t.pre_task_accuracy)},
                         {"buffer", {{"items", t.buffer_items}, {"bytes", t.buffer_bytes}}}};
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, n] : t.buffer_per_class) per_class[std::to_string(c)] = n;
    tj["buffer"]["per_class"] = per_class;
    nlohmann::json seen = nlohmann::json::object();
    for (const auto& [c, n] : t.replay_classes_seen) seen[std::to_string(c)] = n;
    tj["replay_classes_seen"] = seen;
    if (t.fisher) {
      tj["fisher"] = {{"min", t.fisher->min}, {"mean", t.fisher->mean}, {"max", t.fisher->max},
                      {"sparsity", t.fisher->sparsity}, {"samples", t.fisher_samples}};
    } else {
      tj["fisher"] = nullptr;
    }
    tasks_json.push_back(tj);
  }
  nlohmann::json diag = nlohmann::json::array();
  for (const auto& d : diagnostics) {
    nlohmann::json dj = {{"task_id", d.task_id},
                         {"kl", optional_json(d.kl)},
                         {"drift", optional_json(d.drift)},
                         {"observed_forgetting", d.observed_forgetting},
                         {"tv_weighted", optional_json(d.tv_weighted)}};
    if (d.pinsker) {
      dj["pinsker"] = {{"gap", d.pinsker->gap}, {"bound", d.pinsker->bound}, {"slack", d.pinsker->slack},
                       {"holds", d.pinsker->holds}};
    } else {
      dj["pinsker"] = nullptr;
    }
    diag.push_back(dj);
  }
  nlohmann::json auc = nlohmann::json::array();
  for (const auto& a : auc_per_step) auc.push_back(optional_json(a));
  return {{"config", config},
          {"seed", seed},
          {"method", ewcdr::to_string(method)},
          {"accuracy_matrix", accuracy},
          {"auc_per_step", auc},
          {"random_baseline", random_baseline},
          {"metrics", metrics},
          {"tasks", tasks_json},
          {"diagnostics", diag}};
}

nlohmann::json RunRecord::timing_json() const {
  nlohmann::json per_task = nlohmann::json::array();
  for (const auto& t : tasks) per_task.push_back({{"task_id", t.task_id}, {"seconds", t.seconds}});
  return {{"seconds", seconds}, {"tasks", per_task}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.config = j.at("config");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.method = parse_method(j.at("method").get<std::string>());
  r.accuracy = j.at("accuracy_matrix").get<AccuracyMatrix>();
  for (const auto& a : j.at("auc_per_step")) r.auc_per_step.push_back(a.is_null() ? std::nullopt : std::optional(a.get<double>()));
  r.random_baseline = j.at("random_baseline").get<std::vector<double>>();
  r.metrics = build_report(r.accuracy, r.auc_per_step, r.random_baseline);
  for (const auto& tj : j.at("tasks")) {
    TaskReport t;
    t.task_id = tj.at("task_id");
    t.classes = tj.at("classes").get<std::vector<int>>();
    t.lambda = tj.at("lambda");
    const auto& lt = tj.at("loss_trace");
    const auto ce = lt.at("ce").get<std::vector<double>>();
    const auto pen = lt.at("penalty").get<std::vector<double>>();
    const auto total = lt.at("total").get<std::vector<double>>();
    for (std::size_t i = 0; i < ce.size(); ++i) t.steps.push_back({ce[i], pen.at(i), total.at(i)});
    t.epoch_val_accuracy = tj.at("epoch_val_accuracy").get<std::vector<double>>();
    t.best_epoch = tj.at("best_epoch");
    t.ddpm_epoch_loss = tj.at("ddpm_epoch_loss").get<std::vector<double>>();
    t.pre_task_accuracy = optional_from(tj, "pre_task_accuracy");
    t.buffer_items = tj.at("buffer").at("items");
    t.buffer_bytes = tj.at("buffer").at("bytes");
    for (const auto& [c, n] : tj.at("buffer").at("per_class").items()) t.buffer_per_class[std::stoi(c)] = n.get<std::size_t>();
    for (const auto& [c, n] : tj.at("replay_classes_seen").items()) t.replay_classes_seen[std::stoi(c)] = n.get<std::size_t>();
    if (!tj.at("fisher").is_null()) {
      const auto& f = tj.at("fisher");
      t.fisher = FisherSummary{f.at("min"), f.at("mean"), f.at("max"), f.at("sparsity")};
      t.fisher_samples = f.at("samples");
    }
    r.tasks.push_back(std::move(t));
  }
  for (const auto& dj : j.at("diagnostics")) {
    TaskDiagnostics d;
    d.task_id = dj.at("task_id");
    d.kl = optional_from(dj, "kl");
    d.drift = optional_from(dj, "drift");
    d.observed_forgetting = dj.at("observed_forgetting");
    d.tv_weighted = optional_from(dj, "tv_weighted");
    if (!dj.at("pinsker").is_null()) {
      const auto& p = dj.at("pinsker");
      d.pinsker = PinskerCheck{p.at("gap"), p.at("bound"), p.at("slack"), p.at("holds")};
    }
    r.diagnostics.push_back(d);
  }
  return r;
}

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& m) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.precision(17);
  out << "task";
  for (int t = 1; t <= m.num_tasks(); ++t) out << ",after_" << t;
  out << '\n';
  for (int j = 1; j <= m.num_tasks(); ++j) {
    out << j;
    for (int t = 1; t <= m.num_tasks(); ++t) {
      out << ',';
      if (j <= t && m.has(j, t)) out << m.at(j, t);
    }
    out << '\n';
  }
}

}  // namespace ewcdr
