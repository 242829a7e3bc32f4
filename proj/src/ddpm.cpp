#include "ewcdr/ddpm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "ewcdr/checkpoint.hpp"
#include "ewcdr/errors.hpp"
#include "ewcdr/ops.hpp"

namespace ewcdr {

namespace {

constexpr std::size_t kSampleChunk = 64;

double cosine_f(double t, double T) {
  constexpr double s = 0.008;
  const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
  return c * c;
}

Tensor sinusoidal(const std::vector<std::size_t>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor out({t.size(), dim}, 0.0);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      out[b * dim + i] = std::sin(arg);
      out[b * dim + half + i] = std::cos(arg);
    }
  }
  return out;
}

void check_timestep(std::size_t t, const DiffusionSchedule& schedule) {
  if (t < 1 || t > schedule.T) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule.T) + "]");
  }
}

}  // namespace

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "linear") return ScheduleKind::linear;
  if (text == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule '" + text + "' (expected linear or cosine)");
}

DiffusionSchedule build_schedule(ScheduleKind kind, std::size_t T) {
  if (T < 2) throw ConfigError("diffusion needs T >= 2, got " + std::to_string(T));
  DiffusionSchedule s;
  s.kind = kind;
  s.T = T;
  s.beta.resize(T);
  const double Td = static_cast<double>(T);
  for (std::size_t i = 0; i < T; ++i) {
    if (kind == ScheduleKind::linear) {
      s.beta[i] = 1e-4 + (2e-2 - 1e-4) * static_cast<double>(i) / (Td - 1.0);
    } else {
      const double b = 1.0 - cosine_f(static_cast<double>(i + 1), Td) / cosine_f(static_cast<double>(i), Td);
      s.beta[i] = std::clamp(b, 1e-12, 0.999);
    }
  }
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

Tensor forward_noise(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& schedule) {
  check_timestep(t, schedule);
  if (x0.shape() != eps.shape()) {
    throw ShapeError("forward_noise: x0 " + to_string(x0.shape()) + " vs eps " + to_string(eps.shape()));
  }
  const double a = std::sqrt(schedule.alpha_bar_at(t)), b = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

void DenoiserConfig::validate() const {
  if (widths.empty()) throw ConfigError("ddpm.widths must list at least one level");
  const std::size_t factor = std::size_t{1} << (widths.size() - 1);
  if (image.height % factor || image.width % factor) {
    throw ConfigError("ddpm: image must be divisible by " + std::to_string(factor) + " for " +
                      std::to_string(widths.size()) + " levels");
  }
  if (time_dim < 2 || time_dim % 2) throw ConfigError("ddpm.time_dim must be even and >= 2");
  if (num_classes < 1) throw ConfigError("ddpm.num_classes must be >= 1");
}

DenoiserConfig DenoiserConfig::paper(ImageShape image, std::size_t num_classes) {
  DenoiserConfig c;
  c.image = image;
  c.widths = {64, 128, 256, 512};
  c.time_dim = 256;
  c.num_classes = num_classes;
  return c;
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"image", {c.image.height, c.image.width, c.image.channels}},
       {"widths", c.widths},
       {"time_dim", c.time_dim},
       {"num_classes", c.num_classes},
       {"max_tasks", c.max_tasks},
       {"conditioning", c.conditioning == Conditioning::class_only ? "class_only" : "class_plus_task_film"}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  const auto img = j.at("image");
  c.image = {img.at(0).get<std::size_t>(), img.at(1).get<std::size_t>(), img.at(2).get<std::size_t>()};
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.time_dim = j.at("time_dim");
  c.num_classes = j.at("num_classes");
  c.max_tasks = j.at("max_tasks");
  c.conditioning = j.at("conditioning") == "class_only" ? Conditioning::class_only : Conditioning::class_plus_task_film;
}

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  build(seed);
}

void Denoiser::add_resblock(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  const std::size_t E = config_.time_dim;
  params_.add(name + ".norm1.gamma", Tensor({in}, 1.0));
  params_.add(name + ".norm1.beta", Tensor({in}, 0.0));
  params_.add(name + ".conv1.weight", nn::normal({9 * in, out}, 1.0 / std::sqrt(9.0 * in), rng));
  params_.add(name + ".conv1.bias", Tensor({out}, 0.0));
  params_.add(name + ".film.weight", nn::truncated_normal({E, 2 * out}, 0.02, rng));
  params_.add(name + ".film.bias", Tensor({2 * out}, 0.0));
  params_.add(name + ".norm2.gamma", Tensor({out}, 1.0));
  params_.add(name + ".norm2.beta", Tensor({out}, 0.0));
  params_.add(name + ".conv2.weight", nn::normal({9 * out, out}, 0.1 / std::sqrt(9.0 * out), rng));
  params_.add(name + ".conv2.bias", Tensor({out}, 0.0));
  if (in != out) {
    params_.add(name + ".skip.weight", nn::normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    params_.add(name + ".skip.bias", Tensor({out}, 0.0));
  }
}

void Denoiser::build(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t E = config_.time_dim, C = config_.image.channels;
  const auto& w = config_.widths;
  params_.add("time.fc1.weight", nn::normal({E, E}, 1.0 / std::sqrt(static_cast<double>(E)), rng));
  params_.add("time.fc1.bias", Tensor({E}, 0.0));
  params_.add("time.fc2.weight", nn::normal({E, E}, 1.0 / std::sqrt(static_cast<double>(E)), rng));
  params_.add("time.fc2.bias", Tensor({E}, 0.0));
  params_.add("class_embed", nn::normal({config_.num_classes, E}, 1.0, rng));
  if (config_.conditioning == Conditioning::class_plus_task_film) {
    params_.add("task_embed", nn::normal({config_.max_tasks, E}, 1.0, rng));
  }
  params_.add("in.weight", nn::normal({9 * C, w[0]}, 1.0 / std::sqrt(9.0 * C), rng));
  params_.add("in.bias", Tensor({w[0]}, 0.0));
  std::size_t prev = w[0];
  for (std::size_t i = 0; i < w.size(); ++i) {
    add_resblock("down." + std::to_string(i), prev, w[i], rng);
    prev = w[i];
  }
  add_resblock("mid", prev, prev, rng);
  for (std::size_t i = w.size() - 1; i-- > 0;) add_resblock("up." + std::to_string(i), w[i + 1] + w[i], w[i], rng);
  params_.add("out.norm.gamma", Tensor({w[0]}, 1.0));
  params_.add("out.norm.beta", Tensor({w[0]}, 0.0));
  params_.add("out.weight", Tensor({9 * w[0], C}, 0.0));
  params_.add("out.bias", Tensor({C}, 0.0));
}

ag::Var Denoiser::resblock(const std::string& name, const ag::Var& x, const ag::Var& emb) const {
  using namespace ag;
  const auto& P = params_;
  Var h = silu(layer_norm(x, P.get(name + ".norm1.gamma"), P.get(name + ".norm1.beta")));
  h = conv3x3(h, P.get(name + ".conv1.weight"), P.get(name + ".conv1.bias"));
  h = film(h, linear(emb, P.get(name + ".film.weight"), P.get(name + ".film.bias")));
  h = silu(layer_norm(h, P.get(name + ".norm2.gamma"), P.get(name + ".norm2.beta")));
  h = conv3x3(h, P.get(name + ".conv2.weight"), P.get(name + ".conv2.bias"));
  const Var skip = x.value().cols() == h.value().cols()
                       ? x
                       : linear(x, P.get(name + ".skip.weight"), P.get(name + ".skip.bias"));
  return add(h, skip);
}

ag::Var Denoiser::predict(const ag::Var& x_t, const std::vector<std::size_t>& t, const std::vector<int>& labels,
                          const std::vector<int>& tasks) const {
  using namespace ag;
  const Tensor& xv = x_t.value();
  if (xv.rank() != 4 || xv.dim(1) != config_.image.height || xv.dim(2) != config_.image.width ||
      xv.dim(3) != config_.image.channels) {
    throw ShapeError("denoiser input " + to_string(xv.shape()) + " does not match configured image");
  }
  const std::size_t B = xv.dim(0);
  if (t.size() != B || labels.size() != B) throw ShapeError("denoiser: one timestep and label per image required");
  const auto& P = params_;

  Var emb = Var::constant(sinusoidal(t, config_.time_dim));
  emb = linear(silu(linear(emb, P.get("time.fc1.weight"), P.get("time.fc1.bias"))), P.get("time.fc2.weight"),
               P.get("time.fc2.bias"));
  emb = add(emb, embedding(P.get("class_embed"), labels));
  if (config_.conditioning == Conditioning::class_plus_task_film) {
    if (tasks.size() != B) throw ShapeError("unified denoiser needs one task id per image");
    std::vector<int> rows(B);
    for (std::size_t b = 0; b < B; ++b) rows[b] = tasks[b] - 1;
    emb = add(emb, embedding(P.get("task_embed"), rows));
  }
  emb = silu(emb);

  const std::size_t L = config_.widths.size();
  Var h = conv3x3(x_t, P.get("in.weight"), P.get("in.bias"));
  std::vector<Var> skips(L);
  for (std::size_t i = 0; i < L; ++i) {
    h = resblock("down." + std::to_string(i), h, emb);
    skips[i] = h;
    if (i + 1 < L) h = avg_pool2(h);
  }
  h = resblock("mid", h, emb);
  for (std::size_t i = L - 1; i-- > 0;) {
    h = concat_channels(upsample2(h), skips[i]);
    h = resblock("up." + std::to_string(i), h, emb);
  }
  h = silu(layer_norm(h, P.get("out.norm.gamma"), P.get("out.norm.beta")));
  return conv3x3(h, P.get("out.weight"), P.get("out.bias"));
}

Denoiser Denoiser::clone() const {
  Denoiser d;
  d.config_ = config_;
  d.build(0);
  d.params_.assign(params_.flatten());
  d.trained_ = trained_;
  return d;
}

void Denoiser::save(const std::filesystem::path& path) const {
  Checkpoint c;
  c.kind = "ddpm_denoiser";
  nlohmann::json trained = nlohmann::json::array();
  for (const auto& [label, task] : trained_) trained.push_back({label, task});
  c.config = {{"denoiser", config_}, {"trained_classes", trained}};
  c.slots = params_.index_map();
  c.values = params_.flatten();
  write_checkpoint(path, c);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  Checkpoint c = read_checkpoint(path);
  if (c.kind != "ddpm_denoiser") throw FormatError("checkpoint holds '" + c.kind + "', not a denoiser", 12);
  Denoiser d;
  d.config_ = c.config.at("denoiser").get<DenoiserConfig>();
  d.config_.validate();
  d.build(0);
  if (d.params_.flat_size() != c.values.size()) throw FormatError("denoiser checkpoint size mismatch", 0);
  d.params_.assign(c.values);
  for (const auto& pair : c.config.at("trained_classes")) d.trained_[pair.at(0).get<int>()] = pair.at(1).get<int>();
  return d;
}

Tensor to_model_space(const Tensor& images) {
  Tensor x = images;
  for (double& v : x.values()) v = 2.0 * v - 1.0;
  return x;
}

Tensor from_model_space(const Tensor& x) {
  Tensor images = x;
  for (double& v : images.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  return images;
}

ag::Var ddpm_loss_at(const NoisePredictor& model, const Tensor& x0, const std::vector<int>& labels,
                     const std::vector<int>& tasks, const std::vector<std::size_t>& t, const Tensor& eps,
                     const DiffusionSchedule& schedule) {
  if (x0.rank() != 4 || x0.dim(0) == 0) throw ShapeError("ddpm_loss: expected a nonempty [B,H,W,C] batch");
  if (eps.shape() != x0.shape()) throw ShapeError("ddpm_loss: noise shape differs from batch");
  const std::size_t B = x0.dim(0), per = x0.size() / B;
  if (t.size() != B) throw ShapeError("ddpm_loss: one timestep per image required");
  Tensor xt = to_model_space(x0);
  for (std::size_t b = 0; b < B; ++b) {
    check_timestep(t[b], schedule);
    const double a = std::sqrt(schedule.alpha_bar_at(t[b])), s = std::sqrt(1.0 - schedule.alpha_bar_at(t[b]));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) xt[i] = a * xt[i] + s * eps[i];
  }
  return ag::mean_squared_error(model.predict(ag::Var::constant(std::move(xt)), t, labels, tasks), eps);
}

ag::Var ddpm_loss(const NoisePredictor& model, const Tensor& x0, const std::vector<int>& labels,
                  const std::vector<int>& tasks, const DiffusionSchedule& schedule, Rng& rng) {
  if (x0.rank() != 4 || x0.dim(0) == 0) throw ShapeError("ddpm_loss: expected a nonempty [B,H,W,C] batch");
  std::vector<std::size_t> t(x0.dim(0));
  for (auto& ti : t) ti = 1 + rng.uniform_index(schedule.T);
  Tensor eps(x0.shape());
  for (double& v : eps.values()) v = rng.normal();
  return ddpm_loss_at(model, x0, labels, tasks, t, eps, schedule);
}

Tensor sample(const NoisePredictor& model, const std::vector<int>& labels, const DiffusionSchedule& schedule,
              Rng& rng, const std::vector<int>& tasks, const SampleOptions& options) {
  const ImageShape shape = model.image_shape();
  const std::size_t n = labels.size(), per = shape.pixels();
  Tensor out({n, shape.height, shape.width, shape.channels});
  const std::uint64_t base = rng.next_u64();
  ag::NoGradGuard no_grad;
  for (std::size_t start = 0, chunk = 0; start < n; start += kSampleChunk, ++chunk) {
    const std::size_t m = std::min(kSampleChunk, n - start);
    Rng local(derive_seed(base, {chunk}));
    const std::vector<int> y(labels.begin() + static_cast<std::ptrdiff_t>(start),
                             labels.begin() + static_cast<std::ptrdiff_t>(start + m));
    std::vector<int> task_ids;
    if (!tasks.empty()) {
      task_ids.assign(tasks.begin() + static_cast<std::ptrdiff_t>(start),
                      tasks.begin() + static_cast<std::ptrdiff_t>(start + m));
    }
    Tensor x({m, shape.height, shape.width, shape.channels});
    for (double& v : x.values()) v = local.normal();
    for (std::size_t t = schedule.T; t >= 1; --t) {
      const Tensor eps = model.predict(ag::Var::constant(x), std::vector<std::size_t>(m, t), y, task_ids).value();
      const double beta = schedule.beta_at(t), alpha = schedule.alpha_at(t), abar = schedule.alpha_bar_at(t);
      const double abar_prev = t > 1 ? schedule.alpha_bar_at(t - 1) : 1.0;
      const double sigma = std::sqrt(beta);
      // Posterior mean of q(x_{t-1} | x_t, x0_hat); identical to
      // (x_t - beta/sqrt(1-abar) eps)/sqrt(alpha) when x0_hat is not clipped.
      const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
      const double ct = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
      for (std::size_t i = 0; i < x.size(); ++i) {
        double x0 = (x[i] - std::sqrt(1.0 - abar) * eps[i]) / std::sqrt(abar);
        if (options.clip_denoised) x0 = std::clamp(x0, -1.0, 1.0);
        x[i] = c0 * x0 + ct * x[i] + sigma * local.normal();
      }
    }
    const Tensor images = from_model_space(x);
    std::copy(images.values().begin(), images.values().end(), out.data() + start * per);
  }
  return out;
}

Tensor sample(const Denoiser& model, const std::vector<int>& labels, const DiffusionSchedule& schedule, Rng& rng,
              const SampleOptions& options) {
  std::vector<int> tasks;
  for (int y : labels) {
    if (!model.knows(y)) throw ContractError("generator was never trained on class " + std::to_string(y));
    tasks.push_back(model.trained_classes().at(y));
  }
  if (model.config().conditioning == Conditioning::class_only) tasks.clear();
  return sample(static_cast<const NoisePredictor&>(model), labels, schedule, rng, tasks, options);
}

GeneratorTrace train_generator(Denoiser& model, const LabeledDataset& data, const DiffusionSchedule& schedule,
                               const GeneratorTrainConfig& config, int task_id, const std::vector<int>& tasks) {
  GeneratorTrace trace;
  if (config.epochs <= 0) return trace;
  if (data.size() == 0) throw ContractError("train_generator: empty dataset");
  if (!tasks.empty() && tasks.size() != data.size()) throw ShapeError("train_generator: one task id per example");
  const bool unified = model.config().conditioning == Conditioning::class_plus_task_film;
  nn::AdamW opt(config.optimizer, model.params().flat_size());
  std::vector<double> theta = model.params().flatten();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    std::size_t seen = 0;
    const auto order = epoch_batches(data.size(), config.batch_size, derive_seed(config.seed, {0xD1FF, std::uint64_t(epoch)}));
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
      const Batch batch = gather(data, order[bi]);
      std::vector<int> batch_tasks;
      if (unified) {
        for (std::size_t i : order[bi]) batch_tasks.push_back(tasks.empty() ? task_id : tasks[i]);
      }
      Rng rng(derive_seed(config.seed, {0xD1FF, std::uint64_t(epoch), bi}));
      model.params().zero_grad();
      ag::Var loss = ddpm_loss(model, batch.images, batch.labels, batch_tasks, schedule, rng);
      const double value = loss.item();
      if (!std::isfinite(value)) throw TrainingError("ddpm", epoch + 1, "non-finite loss");
      loss.backward();
      opt.step(theta, model.params().flat_grad());
      model.params().assign(theta);
      total += value * static_cast<double>(batch.labels.size());
      seen += batch.labels.size();
    }
    trace.epoch_loss.push_back(total / static_cast<double>(seen));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[i];
    if (!model.knows(y)) model.mark_trained(y, tasks.empty() ? task_id : tasks[i]);
  }
  return trace;
}

void write_loss_trace_csv(const std::filesystem::path& path, const GeneratorTrace& trace) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "epoch,loss\n";
  out.precision(17);
  for (std::size_t e = 0; e < trace.epoch_loss.size(); ++e) out << e + 1 << ',' << trace.epoch_loss[e] << '\n';
}

std::string to_string(GeneratorMode mode) { return mode == GeneratorMode::per_task ? "per_task" : "unified"; }

GeneratorMode parse_generator_mode(const std::string& text) {
  if (text == "per_task") return GeneratorMode::per_task;
  if (text == "unified") return GeneratorMode::unified;
  throw ConfigError("unknown generator mode '" + text + "' (expected per_task or unified)");
}

std::size_t GeneratorRegistry::size() const {
  return mode_ == GeneratorMode::per_task ? per_task_.size() : (unified_ ? 1 : 0);
}

void GeneratorRegistry::store(int task_id, std::shared_ptr<const Denoiser> generator) {
  if (mode_ == GeneratorMode::per_task) {
    per_task_[task_id] = std::move(generator);
  } else {
    unified_ = std::move(generator);
  }
}

std::shared_ptr<const Denoiser> GeneratorRegistry::get(int task_id) const {
  if (mode_ == GeneratorMode::unified) return unified_;
  auto it = per_task_.find(task_id);
  if (it == per_task_.end()) throw ContractError("no generator stored for task " + std::to_string(task_id));
  return it->second;
}

Tensor GeneratorRegistry::sample(const std::vector<int>& labels, const DiffusionSchedule& schedule, Rng& rng) const {
  if (mode_ == GeneratorMode::unified) {
    if (!unified_) throw ContractError("unified generator has not been trained");
    return ewcdr::sample(*unified_, labels, schedule, rng);
  }
  std::map<int, std::vector<std::size_t>> routed;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int owner = -1;
    for (const auto& [task, g] : per_task_) {
      if (g->knows(labels[i])) owner = task;
    }
    if (owner < 0) throw ContractError("no generator was trained on class " + std::to_string(labels[i]));
    routed[owner].push_back(i);
  }
  const std::uint64_t base = rng.next_u64();
  Tensor out;
  for (const auto& [task, idx] : routed) {
    std::vector<int> sub;
    for (std::size_t i : idx) sub.push_back(labels[i]);
    Rng local(derive_seed(base, {std::uint64_t(task)}));
    const Tensor images = ewcdr::sample(*per_task_.at(task), sub, schedule, local);
    if (out.empty()) {
      Shape shape = images.shape();
      shape[0] = labels.size();
      out = Tensor(shape);
    }
    const std::size_t per = images.size() / sub.size();
    for (std::size_t k = 0; k < idx.size(); ++k) std::copy_n(images.data() + k * per, per, out.data() + idx[k] * per);
  }
  return out;
}

}  // namespace ewcdr
