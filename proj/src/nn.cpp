#include "ewcdr/nn.hpp"

#include <algorithm>
#include <cmath>

#include "ewcdr/errors.hpp"

namespace ewcdr::nn {

ag::Var& ParameterSet::add(std::string name, Tensor init) {
  for (const auto& e : params_)
    if (e.name == name) throw ContractError("duplicate parameter name " + name);
  params_.push_back({std::move(name), ag::Var::parameter(std::move(init))});
  return params_.back().var;
}

std::size_t ParameterSet::flat_size() const {
  std::size_t n = 0;
  for (const auto& e : params_) n += e.var.value().size();
  return n;
}

ag::Var& ParameterSet::get(const std::string& name) {
  for (auto& e : params_)
    if (e.name == name) return e.var;
  throw ContractError("unknown parameter " + name);
}

const ag::Var& ParameterSet::get(const std::string& name) const {
  for (const auto& e : params_)
    if (e.name == name) return e.var;
  throw ContractError("unknown parameter " + name);
}

std::vector<ParamSlot> ParameterSet::index_map() const {
  std::vector<ParamSlot> slots;
  std::size_t offset = 0;
  for (const auto& e : params_) {
    slots.push_back({e.name, e.var.shape(), offset});
    offset += e.var.value().size();
  }
  return slots;
}

FlatCoordinate ParameterSet::locate(std::size_t flat_index) const {
  std::size_t offset = 0;
  for (const auto& e : params_) {
    const std::size_t n = e.var.value().size();
    if (flat_index < offset + n) {
      std::size_t local = flat_index - offset;
      const Shape& shape = e.var.shape();
      std::vector<std::size_t> coord(shape.size());
      for (std::size_t d = shape.size(); d-- > 0;) {
        coord[d] = local % shape[d];
        local /= shape[d];
      }
      return {e.name, coord};
    }
    offset += n;
  }
  throw ContractError("flat index " + std::to_string(flat_index) + " out of range");
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(flat_size());
  for (const auto& e : params_) flat.insert(flat.end(), e.var.value().values().begin(), e.var.value().values().end());
  return flat;
}

void ParameterSet::assign(std::span<const double> flat) {
  if (flat.size() != flat_size()) {
    throw ShapeError("assign: got " + std::to_string(flat.size()) + " values for " + std::to_string(flat_size()) +
                     " parameters");
  }
  std::size_t offset = 0;
  for (auto& e : params_) {
    auto dst = e.var.value().values();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
}

std::vector<double> ParameterSet::flat_grad() const {
  std::vector<double> flat;
  flat.reserve(flat_size());
  for (const auto& e : params_) {
    const Tensor& g = e.var.grad();
    if (g.size() == e.var.value().size()) {
      flat.insert(flat.end(), g.values().begin(), g.values().end());
    } else {
      flat.insert(flat.end(), e.var.value().size(), 0.0);
    }
  }
  return flat;
}

void ParameterSet::zero_grad() {
  for (auto& e : params_) e.var.zero_grad();
}

void ParameterSet::replace(const std::string& name, Tensor value) {
  for (auto& e : params_) {
    if (e.name == name) {
      e.var = ag::Var::parameter(std::move(value));
      return;
    }
  }
  throw ContractError("unknown parameter " + name);
}

Tensor truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.truncated_normal(stddev);
  return t;
}

Tensor normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

AdamW::AdamW(AdamWConfig config, std::size_t dim) : config_(config), m_(dim, 0.0), v_(dim, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ShapeError("AdamW: optimizer built for " + std::to_string(m_.size()) + " parameters");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * params[i]);
  }
}

}  // namespace ewcdr::nn
