#include "ewcdr/ewc.hpp"

#include <algorithm>
#include <map>

#include "ewcdr/errors.hpp"
#include "ewcdr/log.hpp"

namespace ewcdr {

namespace {

void check_dims(std::size_t theta, const FisherAnchor& a) {
  if (a.fisher.size() != a.anchor.size()) throw ContractError("anchor holds mismatched Fisher and theta* lengths");
  if (theta < a.anchor.size()) {
    throw ContractError("parameter vector of length " + std::to_string(theta) + " is shorter than the anchor (" +
                        std::to_string(a.anchor.size()) + ")");
  }
}

}  // namespace

std::string to_string(AnchorMode mode) {
  return mode == AnchorMode::sum_over_tasks ? "sum_over_tasks" : "latest_only";
}

AnchorMode parse_anchor_mode(const std::string& text) {
  if (text == "sum_over_tasks") return AnchorMode::sum_over_tasks;
  if (text == "latest_only") return AnchorMode::latest_only;
  throw ConfigError("unknown anchor mode '" + text + "'");
}

void AnchorSet::add(FisherAnchor anchor) {
  if (mode_ == AnchorMode::latest_only) anchors_.clear();
  anchors_.push_back(std::move(anchor));
}

std::vector<double> empirical_fisher(std::size_t count, std::size_t dim, const ExampleGradient& gradient) {
  std::vector<double> fisher(dim, 0.0), grad(dim);
  for (std::size_t i = 0; i < count; ++i) {
    std::fill(grad.begin(), grad.end(), 0.0);
    gradient(i, grad);
    for (std::size_t p = 0; p < dim; ++p) fisher[p] += grad[p] * grad[p];
  }
  if (count > 0) {
    for (double& f : fisher) f /= static_cast<double>(count);
  }
  return fisher;
}

FisherAnchor estimate_fisher(const ViTClassifier& model, const LabeledDataset& data, const LabelMap& labels,
                             std::size_t samples_per_class, Rng& rng, int task_id) {
  std::vector<std::size_t> chosen;
  for (int cls : data.class_set) {
    const auto idx = data.indices_of(cls);
    if (idx.size() < samples_per_class) {
      log_warning("Fisher: class " + std::to_string(cls) + " has " + std::to_string(idx.size()) +
                  " examples, fewer than the requested " + std::to_string(samples_per_class) + "; using all");
    }
    const auto perm = rng.permutation(idx.size());
    for (std::size_t k = 0; k < std::min(samples_per_class, idx.size()); ++k) chosen.push_back(idx[perm[k]]);
  }
  std::sort(chosen.begin(), chosen.end());

  // The model is only read; gradients live on its parameter nodes.
  auto& params = const_cast<ViTClassifier&>(model).params();
  const auto kind = model.config().head_kind;
  FisherAnchor out;
  out.fisher = empirical_fisher(chosen.size(), model.num_parameters(), [&](std::size_t i, std::vector<double>& g) {
    const Batch one = gather(data, std::span<const std::size_t>(&chosen[i], 1));
    params.zero_grad();
    classification_loss(model.forward(one.images), labels.to_head(one.labels), kind).backward();
    g = params.flat_grad();
  });
  params.zero_grad();
  out.anchor = model.theta();
  out.sample_count = chosen.size();
  out.task_id = task_id;
  return out;
}

double fisher_weighted_drift(std::span<const double> theta, const FisherAnchor& anchor) {
  check_dims(theta.size(), anchor);
  double total = 0.0;
  for (std::size_t i = 0; i < anchor.anchor.size(); ++i) {
    const double d = theta[i] - anchor.anchor[i];
    total += anchor.fisher[i] * d * d;
  }
  return total;
}

double ewc_penalty(std::span<const double> theta, const AnchorSet& anchors) {
  double total = 0.0;
  for (const auto& a : anchors.anchors()) total += fisher_weighted_drift(theta, a);
  return total;
}

void add_ewc_gradient(std::span<const double> theta, const AnchorSet& anchors, double scale, std::span<double> grad) {
  if (grad.size() != theta.size()) throw ContractError("gradient and parameter lengths differ");
  for (const auto& a : anchors.anchors()) {
    check_dims(theta.size(), a);
    for (std::size_t i = 0; i < a.anchor.size(); ++i) grad[i] += scale * 2.0 * a.fisher[i] * (theta[i] - a.anchor[i]);
  }
}

std::vector<double> ewc_gradient(std::span<const double> theta, const AnchorSet& anchors) {
  std::vector<double> grad(theta.size(), 0.0);
  add_ewc_gradient(theta, anchors, 1.0, grad);
  return grad;
}

FisherSummary summarize(const FisherAnchor& anchor) {
  FisherSummary s;
  if (anchor.fisher.empty()) return s;
  s.min = *std::min_element(anchor.fisher.begin(), anchor.fisher.end());
  s.max = *std::max_element(anchor.fisher.begin(), anchor.fisher.end());
  std::size_t zeros = 0;
  for (double f : anchor.fisher) {
    s.mean += f;
    zeros += f == 0.0;
  }
  s.mean /= static_cast<double>(anchor.fisher.size());
  s.sparsity = static_cast<double>(zeros) / static_cast<double>(anchor.fisher.size());
  return s;
}

}  // namespace ewcdr
