#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ewcdr/autograd.hpp"
#include "ewcdr/rng.hpp"

namespace ewcdr::nn {

// One named tensor inside a flat parameter vector.
struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
};

// Coordinate of a flat parameter index.
struct FlatCoordinate {
  std::string name;
  std::vector<std::size_t> index;
};

// Ordered parameter registry. Registration order defines the flat layout:
// parameter p occupies [offset_p, offset_p + numel_p). Growing the last
// parameter along its leading axis keeps every earlier flat index intact.
class ParameterSet {
 public:
  ag::Var& add(std::string name, Tensor init);

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t flat_size() const;
  const ag::Var& operator[](std::size_t i) const { return params_[i].var; }
  ag::Var& operator[](std::size_t i) { return params_[i].var; }
  ag::Var& get(const std::string& name);
  const ag::Var& get(const std::string& name) const;
  const std::string& name(std::size_t i) const { return params_[i].name; }

  std::vector<ParamSlot> index_map() const;
  FlatCoordinate locate(std::size_t flat_index) const;

  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  std::vector<double> flat_grad() const;
  void zero_grad();

  // Swaps in a new tensor for an existing slot (used for head growth).
  void replace(const std::string& name, Tensor value);

 private:
  struct Entry {
    std::string name;
    ag::Var var;
  };
  std::vector<Entry> params_;
};

Tensor truncated_normal(Shape shape, double stddev, Rng& rng);
Tensor normal(Shape shape, double stddev, Rng& rng);

struct AdamWConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay Adam over a flat parameter vector.
class AdamW {
 public:
  AdamW(AdamWConfig config, std::size_t dim);
  void step(std::span<double> params, std::span<const double> grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamWConfig config_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace ewcdr::nn
