#include "ewcdr/vit.hpp"

#include <algorithm>
#include <cmath>

#include "ewcdr/checkpoint.hpp"
#include "ewcdr/errors.hpp"
#include "ewcdr/ops.hpp"

namespace ewcdr {

namespace {
constexpr double kInitStd = 0.02;
constexpr const char* kHeadName = "head.classes";
}  // namespace

void ViTConfig::validate() const {
  if (patch_size == 0 || image.height % patch_size || image.width % patch_size) {
    throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " not divisible by patch size " + std::to_string(patch_size));
  }
  if (heads == 0 || hidden_dim % heads) throw ConfigError("vit.hidden_dim must be divisible by vit.heads");
  if (num_classes < 1) throw ConfigError("vit.num_classes must be >= 1");
  if (depth < 1 || mlp_dim < 1 || image.channels < 1) throw ConfigError("vit depth/mlp_dim/channels must be >= 1");
}

ViTConfig ViTConfig::desk() { return {}; }

ViTConfig ViTConfig::paper() {
  ViTConfig c;
  c.image = {224, 224, 3};
  c.patch_size = 16;
  c.depth = 6;
  c.heads = 8;
  c.hidden_dim = 512;
  c.mlp_dim = 2048;
  return c;
}

ViTConfig ViTConfig::appendix() {
  ViTConfig c;
  c.depth = 4;
  c.heads = 4;
  c.hidden_dim = 256;
  c.mlp_dim = 512;
  return c;
}

ViTConfig ViTConfig::tiny() {
  ViTConfig c;
  c.image = {12, 12, 1};
  c.patch_size = 4;
  c.depth = 2;
  c.heads = 2;
  c.hidden_dim = 32;
  c.mlp_dim = 64;
  return c;
}

ViTConfig ViTConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  if (name == "appendix") return appendix();
  if (name == "tiny") return tiny();
  throw ConfigError("unknown vit preset '" + name + "'");
}

void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = {{"image", {c.image.height, c.image.width, c.image.channels}},
       {"patch_size", c.patch_size},
       {"depth", c.depth},
       {"heads", c.heads},
       {"hidden_dim", c.hidden_dim},
       {"mlp_dim", c.mlp_dim},
       {"num_classes", c.num_classes},
       {"head_kind", c.head_kind == HeadKind::softmax ? "softmax" : "sigmoid"}};
}

void from_json(const nlohmann::json& j, ViTConfig& c) {
  const auto img = j.at("image");
  c.image = {img.at(0).get<std::size_t>(), img.at(1).get<std::size_t>(), img.at(2).get<std::size_t>()};
  c.patch_size = j.at("patch_size");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.hidden_dim = j.at("hidden_dim");
  c.mlp_dim = j.at("mlp_dim");
  c.num_classes = j.at("num_classes");
  c.head_kind = j.at("head_kind") == "sigmoid" ? HeadKind::sigmoid : HeadKind::softmax;
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  const bool batched = images.rank() == 4;
  if (!batched && images.rank() != 3) throw ShapeError("patchify expects [H,W,C] or [B,H,W,C]");
  const std::size_t B = batched ? images.dim(0) : 1;
  const std::size_t H = images.dim(batched ? 1 : 0), W = images.dim(batched ? 2 : 1), C = images.dim(batched ? 3 : 2);
  if (patch == 0 || H % patch || W % patch) {
    throw ShapeError("patchify: " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by " +
                     std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, len = patch * patch * C;
  Tensor out({B * gh * gw, len});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        double* dst = out.data() + ((b * gh + py) * gw + px) * len;
        for (std::size_t y = 0; y < patch; ++y)
          std::copy_n(images.data() + ((b * H + py * patch + y) * W + px * patch) * C, patch * C, dst + y * patch * C);
      }
  return out;
}

Tensor unpatchify(const Tensor& patches, const ImageShape& image, std::size_t patch) {
  const std::size_t H = image.height, W = image.width, C = image.channels;
  if (patch == 0 || H % patch || W % patch) throw ShapeError("unpatchify: image not divisible by patch");
  const std::size_t gh = H / patch, gw = W / patch, len = patch * patch * C;
  if (patches.cols() != len || patches.rows() % (gh * gw)) throw ShapeError("unpatchify: patch tensor has wrong shape");
  const std::size_t B = patches.rows() / (gh * gw);
  Tensor out = B == 1 ? Tensor({H, W, C}) : Tensor({B, H, W, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const double* src = patches.data() + ((b * gh + py) * gw + px) * len;
        for (std::size_t y = 0; y < patch; ++y)
          std::copy_n(src + y * patch * C, patch * C, out.data() + ((b * H + py * patch + y) * W + px * patch) * C);
      }
  return out;
}

ViTClassifier::ViTClassifier(ViTConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build(seed);
}

void ViTClassifier::build(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t D = config_.hidden_dim, M = config_.mlp_dim;
  const std::size_t patch_len = config_.patch_size * config_.patch_size * config_.image.channels;
  auto ones = [](std::size_t n) { return Tensor({n}, 1.0); };
  auto zeros = [](Shape s) { return Tensor(std::move(s), 0.0); };

  params_.add("patch_embed.weight", nn::truncated_normal({patch_len, D}, kInitStd, rng));
  params_.add("patch_embed.bias", zeros({D}));
  params_.add("cls_token", nn::truncated_normal({1, D}, kInitStd, rng));
  params_.add("pos_embed", zeros({config_.tokens(), D}));
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    params_.add(p + "ln1.gamma", ones(D));
    params_.add(p + "ln1.beta", zeros({D}));
    params_.add(p + "attn.qkv.weight", nn::truncated_normal({D, 3 * D}, kInitStd, rng));
    params_.add(p + "attn.qkv.bias", zeros({3 * D}));
    params_.add(p + "attn.proj.weight", nn::truncated_normal({D, D}, kInitStd, rng));
    params_.add(p + "attn.proj.bias", zeros({D}));
    params_.add(p + "ln2.gamma", ones(D));
    params_.add(p + "ln2.beta", zeros({D}));
    params_.add(p + "mlp.fc1.weight", nn::truncated_normal({D, M}, kInitStd, rng));
    params_.add(p + "mlp.fc1.bias", zeros({M}));
    params_.add(p + "mlp.fc2.weight", nn::truncated_normal({M, D}, kInitStd, rng));
    params_.add(p + "mlp.fc2.bias", zeros({D}));
  }
  params_.add("norm.gamma", ones(D));
  params_.add("norm.beta", zeros({D}));
  params_.add("head.hidden.weight", nn::truncated_normal({D, D}, kInitStd, rng));
  params_.add("head.hidden.bias", zeros({D}));
  params_.add(kHeadName, zeros({config_.num_classes, D + 1}));
}

void ViTClassifier::check_input(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != config_.image.height || images.dim(2) != config_.image.width ||
      images.dim(3) != config_.image.channels) {
    throw ShapeError("classifier expects [B," + std::to_string(config_.image.height) + "," +
                     std::to_string(config_.image.width) + "," + std::to_string(config_.image.channels) + "], got " +
                     to_string(images.shape()));
  }
}

ag::Var ViTClassifier::features(const Tensor& images) const {
  using namespace ag;
  check_input(images);
  const std::size_t B = images.dim(0);
  const std::size_t T = config_.tokens();
  const auto& P = params_;
  Var patches = Var::constant(patchify(images, config_.patch_size));
  Var x = linear(patches, P.get("patch_embed.weight"), P.get("patch_embed.bias"));
  x = assemble_tokens(x, P.get("cls_token"), P.get("pos_embed"), B);
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Var h = layer_norm(x, P.get(p + "ln1.gamma"), P.get(p + "ln1.beta"));
    h = linear(h, P.get(p + "attn.qkv.weight"), P.get(p + "attn.qkv.bias"));
    h = attention(h, B, T, config_.heads);
    h = linear(h, P.get(p + "attn.proj.weight"), P.get(p + "attn.proj.bias"));
    x = add(x, h);
    h = layer_norm(x, P.get(p + "ln2.gamma"), P.get(p + "ln2.beta"));
    h = gelu(linear(h, P.get(p + "mlp.fc1.weight"), P.get(p + "mlp.fc1.bias")));
    h = linear(h, P.get(p + "mlp.fc2.weight"), P.get(p + "mlp.fc2.bias"));
    x = add(x, h);
  }
  Var cls = take_strided_rows(x, T);
  cls = layer_norm(cls, P.get("norm.gamma"), P.get("norm.beta"));
  return gelu(linear(cls, P.get("head.hidden.weight"), P.get("head.hidden.bias")));
}

ag::Var ViTClassifier::forward(const Tensor& images) const {
  return ag::linear_rows(features(images), params_.get(kHeadName));
}

Tensor ViTClassifier::logits(const Tensor& images) const {
  ag::NoGradGuard guard;
  return forward(images).value();
}

Tensor ViTClassifier::probabilities(const Tensor& images) const {
  return head_probabilities(logits(images), config_.head_kind);
}

Tensor ViTClassifier::embed(const Tensor& images) const {
  ag::NoGradGuard guard;
  return features(images).value();
}

void ViTClassifier::expand_head(std::size_t new_num_classes) {
  if (new_num_classes <= config_.num_classes) {
    throw ContractError("expand_head: cannot go from " + std::to_string(config_.num_classes) + " to " +
                        std::to_string(new_num_classes) + " classes");
  }
  const Tensor& old = params_.get(kHeadName).value();
  Tensor grown({new_num_classes, old.dim(1)}, 0.0);
  std::copy(old.values().begin(), old.values().end(), grown.data());
  params_.replace(kHeadName, std::move(grown));
  config_.num_classes = new_num_classes;
}

void ViTClassifier::save(const std::filesystem::path& path) const {
  Checkpoint c;
  c.kind = "vit_classifier";
  c.config = config_;
  c.slots = params_.index_map();
  c.values = params_.flatten();
  write_checkpoint(path, c);
}

ViTClassifier ViTClassifier::load(const std::filesystem::path& path) {
  Checkpoint c = read_checkpoint(path);
  if (c.kind != "vit_classifier") throw FormatError("checkpoint holds '" + c.kind + "', not a classifier", 12);
  ViTClassifier model;
  model.config_ = c.config.get<ViTConfig>();
  model.config_.validate();
  model.build(0);
  const auto slots = model.params_.index_map();
  if (slots.size() != c.slots.size()) throw FormatError("checkpoint parameter layout mismatch", 0);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name != c.slots[i].name || slots[i].shape != c.slots[i].shape || slots[i].offset != c.slots[i].offset) {
      throw FormatError("checkpoint slot " + c.slots[i].name + " does not match architecture", 0);
    }
  }
  model.params_.assign(c.values);
  return model;
}

bool LabelMap::contains(int cls) const {
  return std::find(classes_.begin(), classes_.end(), cls) != classes_.end();
}

std::size_t LabelMap::extend(std::span<const int> classes) {
  for (int c : classes)
    if (!contains(c)) classes_.push_back(c);
  return classes_.size();
}

int LabelMap::head_index(int cls) const {
  const auto it = std::find(classes_.begin(), classes_.end(), cls);
  if (it == classes_.end()) throw ContractError("class " + std::to_string(cls) + " has no head row yet");
  return static_cast<int>(it - classes_.begin());
}

std::vector<int> LabelMap::to_head(std::span<const int> labels) const {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = head_index(labels[i]);
  return out;
}

ag::Var classification_loss(const ag::Var& logits, const std::vector<int>& labels, HeadKind kind) {
  if (kind == HeadKind::softmax) return ag::softmax_cross_entropy(logits, labels);
  const std::size_t classes = logits.value().cols();
  Tensor targets(logits.shape(), 0.0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw ContractError("label " + std::to_string(labels[r]) + " outside " + std::to_string(classes) + " classes");
    }
    targets[r * classes + static_cast<std::size_t>(labels[r])] = 1.0;
  }
  return ag::sigmoid_binary_cross_entropy(logits, targets);
}

Tensor head_probabilities(const Tensor& logits, HeadKind kind) {
  Tensor p = logits;
  const std::size_t C = p.cols();
  if (kind == HeadKind::sigmoid) {
    for (double& v : p.values()) v = 1.0 / (1.0 + std::exp(-v));
    return p;
  }
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double* row = p.data() + r * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) row[c] /= z;
  }
  return p;
}

}  // namespace ewcdr
