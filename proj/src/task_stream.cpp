#include "ewcdr/task_stream.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "ewcdr/errors.hpp"
#include "ewcdr/npz.hpp"
#include "ewcdr/rng.hpp"

namespace ewcdr {

namespace {

constexpr std::uint64_t kTagSynthetic = 0x5157;
constexpr std::uint64_t kTagLowShot = 0x1057;
constexpr std::uint64_t kTagCarve = 0xCA7E;
constexpr std::uint64_t kTagPermute = 0x9E7;

LabeledDataset empty_like(const LabeledDataset& d, Split split) {
  LabeledDataset out;
  const ImageShape s = d.image_shape();
  out.images = Tensor({0, s.height, s.width, s.channels});
  out.split = split;
  return out;
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(TaskOrder order) {
  switch (order) {
    case TaskOrder::canonical: return "canonical";
    case TaskOrder::reversed: return "reversed";
    case TaskOrder::permutation: return "permutation";
  }
  return "?";
}

TaskOrder parse_task_order(const std::string& text) {
  if (text == "canonical") return TaskOrder::canonical;
  if (text == "reversed") return TaskOrder::reversed;
  if (text == "permutation") return TaskOrder::permutation;
  throw ConfigError("unknown task order '" + text + "'");
}

ImageShape LabeledDataset::image_shape() const {
  if (images.rank() != 4) return {0, 0, 0};
  return {images.dim(1), images.dim(2), images.dim(3)};
}

std::span<const double> LabeledDataset::image(std::size_t i) const {
  const std::size_t px = image_shape().pixels();
  return images.values().subspan(i * px, px);
}

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw SchemaError("images must be [N,H,W,C], got " + to_string(images.shape()));
  if (images.dim(0) != labels.size()) throw SchemaError("image count does not match label count");
  if (labels.empty()) throw SchemaError(to_string(split) + " split is empty");
  if (!std::is_sorted(class_set.begin(), class_set.end()) ||
      std::adjacent_find(class_set.begin(), class_set.end()) != class_set.end()) {
    throw SchemaError("class_set must be sorted and unique");
  }
  for (int y : labels)
    if (!std::binary_search(class_set.begin(), class_set.end(), y))
      throw SchemaError("label " + std::to_string(y) + " not in class_set");
  for (double v : images.values())
    if (!(v >= 0.0 && v <= 1.0)) throw SchemaError("pixel value outside [0,1]");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  const ImageShape s = image_shape();
  const std::size_t px = s.pixels();
  LabeledDataset out;
  out.split = split;
  out.images = Tensor({indices.size(), s.height, s.width, s.channels});
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(images.data() + indices[i] * px, px, out.images.data() + i * px);
    out.labels.push_back(labels[indices[i]]);
  }
  out.class_set = classes_of(out.labels);
  return out;
}

LabeledDataset LabeledDataset::restrict_to(std::span<const int> classes) const {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (std::find(classes.begin(), classes.end(), labels[i]) != classes.end()) keep.push_back(i);
  if (keep.empty()) return empty_like(*this, split);
  return subset(keep);
}

std::vector<std::size_t> LabeledDataset::indices_of(int label) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) idx.push_back(i);
  return idx;
}

std::vector<int> classes_of(std::span<const int> labels) {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

LabeledDataset concatenate(std::span<const LabeledDataset* const> parts, Split split) {
  if (parts.empty()) throw ContractError("concatenate needs at least one dataset");
  const ImageShape s = parts.front()->image_shape();
  std::size_t n = 0;
  for (const auto* p : parts) {
    if (p->size() && p->image_shape() != s) throw ShapeError("concatenate: image shapes differ");
    n += p->size();
  }
  LabeledDataset out;
  out.split = split;
  out.images = Tensor({n, s.height, s.width, s.channels});
  std::size_t offset = 0;
  for (const auto* p : parts) {
    std::copy(p->images.values().begin(), p->images.values().end(), out.images.data() + offset);
    offset += p->images.size();
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
  }
  out.class_set = classes_of(out.labels);
  return out;
}

void StreamConfig::validate() const {
  if (num_tasks < 2) throw ConfigError("stream.num_tasks must be >= 2");
  if (classes_per_task < 1) throw ConfigError("stream.classes_per_task must be >= 1");
  if (!(low_shot_fraction > 0.0 && low_shot_fraction <= 1.0)) throw ConfigError("stream.low_shot_fraction must be in (0,1]");
  if (image_size.height == 0 || image_size.width == 0 || image_size.channels == 0) {
    throw ConfigError("stream.image_size must be positive");
  }
  if (dataset_name == "synthetic") {
    if (num_tasks * classes_per_task > kSyntheticClassVocabulary) {
      throw ConfigError("synthetic generator has " + std::to_string(kSyntheticClassVocabulary) + " classes, requested " +
                        std::to_string(num_tasks * classes_per_task));
    }
    if (train_per_class < 1 || val_per_class < 1 || test_per_class < 1) {
      throw ConfigError("synthetic per-class split sizes must be >= 1");
    }
  }
}

DatasetSplits load_medmnist_file(const std::filesystem::path& path, std::uint64_t seed) {
  const auto arrays = npz::read_npz(path);
  const bool has_val_images = arrays.count("val_images") > 0;
  const bool has_val_labels = arrays.count("val_labels") > 0;
  const bool carve = !has_val_images && !has_val_labels;
  std::vector<std::string> required = {"train_images", "train_labels", "test_images", "test_labels"};
  if (!carve) required.insert(required.begin() + 2, {"val_images", "val_labels"});
  for (const auto& key : required)
    if (!arrays.count(key)) throw SchemaError("archive " + path.string() + " is missing array '" + key + "'");

  auto load_split = [&](const std::string& prefix, Split split) {
    const npz::Array& img = arrays.at(prefix + "_images");
    const npz::Array& lab = arrays.at(prefix + "_labels");
    if (!img.is_unsigned_byte() && !img.is_float()) {
      throw TypeError(prefix + "_images has dtype " + img.dtype + "; expected uint8 or float");
    }
    if (!lab.is_integer()) throw TypeError(prefix + "_labels has dtype " + lab.dtype + "; expected integers");
    if (img.shape.size() != 3 && img.shape.size() != 4) {
      throw SchemaError(prefix + "_images must be (N,H,W) or (N,H,W,C)");
    }
    const std::size_t n = img.shape[0];
    const std::size_t label_width = lab.shape.size() >= 2 ? lab.shape[1] : 1;
    if (lab.shape.empty() || lab.shape[0] != n) throw SchemaError(prefix + "_labels count does not match images");
    if (label_width != 1) throw SchemaError(prefix + "_labels is multi-label; not supported");

    LabeledDataset d;
    d.split = split;
    const std::size_t c = img.shape.size() == 4 ? img.shape[3] : 1;
    std::vector<double> px = img.to_double();
    if (img.is_unsigned_byte()) {
      for (double& v : px) v /= 255.0;
    } else {
      for (double v : px)
        if (!(v >= 0.0 && v <= 1.0)) throw SchemaError(prefix + "_images float pixels must lie in [0,1]");
    }
    d.images = Tensor({n, img.shape[1], img.shape[2], c}, std::move(px));
    for (double v : lab.to_double()) {
      if (v < 0) throw SchemaError(prefix + "_labels contains negative label");
      d.labels.push_back(static_cast<int>(v));
    }
    d.class_set = classes_of(d.labels);
    d.validate();
    return d;
  };

  DatasetSplits out;
  out.train = load_split("train", Split::train);
  out.test = load_split("test", Split::test);
  if (carve) {
    auto [train, val] = carve_validation(out.train, 0.1, seed);
    out.train = std::move(train);
    out.val = std::move(val);
  } else {
    out.val = load_split("val", Split::val);
  }
  return out;
}

namespace {

// Noise-free class template in [0,1].
std::vector<double> synthetic_template(int c, const ImageShape& s) {
  const int family = c / 5;
  const int k = c % 5;
  const double angle = std::numbers::pi * k / 5.0 + family * std::numbers::pi / 10.0;
  const double freq = 1.5 + 0.75 * family;
  const double ring = 2.0 * std::numbers::pi * ((c * 7) % kSyntheticClassVocabulary) / kSyntheticClassVocabulary;
  const double h = static_cast<double>(s.height), w = static_cast<double>(s.width);
  const double cx = (0.5 + 0.28 * std::cos(ring)) * w;
  const double cy = (0.5 + 0.28 * std::sin(ring)) * h;
  const double sigma = 0.18 * std::min(h, w);
  std::vector<double> t(s.pixels());
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / w, v = (static_cast<double>(y) + 0.5) / h;
      const double grating = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * (u * std::cos(angle) + v * std::sin(angle)));
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      for (std::size_t ch = 0; ch < s.channels; ++ch) {
        const double gain = 1.0 - 0.15 * static_cast<double>((static_cast<std::size_t>(c) + ch) % 3);
        t[(y * s.width + x) * s.channels + ch] = gain * (0.15 + 0.35 * grating + 0.45 * blob);
      }
    }
  return t;
}

LabeledDataset synthesize_split(const StreamConfig& cfg, Split split, int per_class, int num_classes) {
  const ImageShape s = cfg.image_size;
  const std::size_t px = s.pixels();
  const std::size_t n = static_cast<std::size_t>(per_class) * static_cast<std::size_t>(num_classes);
  LabeledDataset d;
  d.split = split;
  d.images = Tensor({n, s.height, s.width, s.channels});
  d.labels.reserve(n);
  std::size_t row = 0;
  for (int c = 0; c < num_classes; ++c) {
    const std::vector<double> tmpl = synthetic_template(c, s);
    Rng rng(derive_seed(cfg.seed, {kTagSynthetic, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(c)}));
    for (int i = 0; i < per_class; ++i, ++row) {
      const double contrast = rng.uniform(0.8, 1.2);
      const double brightness = rng.uniform(-0.05, 0.05);
      double* dst = d.images.data() + row * px;
      for (std::size_t p = 0; p < px; ++p) {
        const double v = 0.5 + contrast * (tmpl[p] - 0.5) + brightness + cfg.noise_stddev * rng.normal();
        dst[p] = std::clamp(v, 0.0, 1.0);
      }
      d.labels.push_back(c);
    }
  }
  d.class_set = classes_of(d.labels);
  return d;
}

}  // namespace

DatasetSplits make_synthetic_splits(const StreamConfig& config) {
  config.validate();
  const int classes = config.num_tasks * config.classes_per_task;
  return {synthesize_split(config, Split::train, config.train_per_class, classes),
          synthesize_split(config, Split::val, config.val_per_class, classes),
          synthesize_split(config, Split::test, config.test_per_class, classes)};
}

TaskStream make_synthetic_stream(const StreamConfig& config) {
  return split_class_incremental(make_synthetic_splits(config), config);
}

TaskStream split_class_incremental(const DatasetSplits& data, const StreamConfig& config) {
  if (config.num_tasks < 2) throw ConfigError("stream.num_tasks must be >= 2");
  if (config.classes_per_task < 1) throw ConfigError("stream.classes_per_task must be >= 1");
  const std::vector<int>& all = data.train.class_set;
  const std::size_t needed = static_cast<std::size_t>(config.num_tasks * config.classes_per_task);
  if (needed > all.size()) {
    throw ConfigError("requested " + std::to_string(config.num_tasks) + " tasks x " +
                      std::to_string(config.classes_per_task) + " classes but dataset has only " +
                      std::to_string(all.size()) + " classes");
  }
  std::vector<std::vector<int>> groups;
  for (int k = 0; k < config.num_tasks; ++k) {
    const auto first = all.begin() + k * config.classes_per_task;
    groups.emplace_back(first, first + config.classes_per_task);
  }
  if (config.order == TaskOrder::reversed) {
    std::reverse(groups.begin(), groups.end());
  } else if (config.order == TaskOrder::permutation) {
    Rng rng(derive_seed(config.seed, {kTagPermute}));
    const auto perm = rng.permutation(groups.size());
    std::vector<std::vector<int>> shuffled;
    for (auto i : perm) shuffled.push_back(groups[i]);
    groups = std::move(shuffled);
  }

  TaskStream stream;
  stream.order = config.order;
  std::vector<int> cumulative;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    Task t;
    t.task_id = static_cast<int>(k + 1);
    t.train = data.train.restrict_to(groups[k]);
    t.val = data.val.restrict_to(groups[k]);
    t.test = data.test.restrict_to(groups[k]);
    if (config.low_shot_fraction < 1.0) {
      t.train = low_shot_subsample(t.train, config.low_shot_fraction,
                                   derive_seed(config.seed, {kTagLowShot, static_cast<std::uint64_t>(groups[k].front())}));
    }
    if (t.train.class_set != groups[k]) throw SchemaError("train split lacks examples for task " + std::to_string(k + 1));
    cumulative.insert(cumulative.end(), groups[k].begin(), groups[k].end());
    stream.cumulative_classes.push_back(cumulative);
    stream.tasks.push_back(std::move(t));
  }
  return stream;
}

LabeledDataset low_shot_subsample(const LabeledDataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("low_shot_fraction must be in (0,1]");
  std::vector<std::size_t> keep;
  for (int c : data.class_set) {
    std::vector<std::size_t> idx = data.indices_of(c);
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
    const auto perm = rng.permutation(idx.size());
    const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
    for (std::size_t i = 0; i < take; ++i) keep.push_back(idx[perm[i]]);
  }
  std::sort(keep.begin(), keep.end());
  return data.subset(keep);
}

std::pair<LabeledDataset, LabeledDataset> carve_validation(const LabeledDataset& train, double fraction,
                                                           std::uint64_t seed) {
  std::vector<std::size_t> keep, held;
  for (int c : train.class_set) {
    std::vector<std::size_t> idx = train.indices_of(c);
    Rng rng(derive_seed(seed, {kTagCarve, static_cast<std::uint64_t>(c)}));
    const auto perm = rng.permutation(idx.size());
    std::size_t n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
    n_val = std::min(n_val, idx.size() > 1 ? idx.size() - 1 : 0);
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_val ? held : keep).push_back(idx[perm[i]]);
  }
  std::sort(keep.begin(), keep.end());
  std::sort(held.begin(), held.end());
  LabeledDataset tr = train.subset(keep);
  LabeledDataset va = train.subset(held);
  va.split = Split::val;
  return {std::move(tr), std::move(va)};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ContractError("batch_size must be >= 1");
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

Batch gather(const LabeledDataset& data, std::span<const std::size_t> indices) {
  const ImageShape s = data.image_shape();
  const std::size_t px = s.pixels();
  Batch b;
  b.images = Tensor({indices.size(), s.height, s.width, s.channels});
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(data.images.data() + indices[i] * px, px, b.images.data() + i * px);
    b.labels.push_back(data.labels[indices[i]]);
  }
  return b;
}

std::vector<Batch> batches(const LabeledDataset& data, std::size_t batch_size, std::uint64_t seed) {
  std::vector<Batch> out;
  for (const auto& idx : epoch_batches(data.size(), batch_size, seed)) out.push_back(gather(data, idx));
  return out;
}

}  // namespace ewcdr
