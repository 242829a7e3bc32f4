#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "ewcdr/tensor.hpp"

// Minimal tape-free reverse-mode autodiff. Every op returns a Var whose node
// keeps its inputs alive; backward() topologically sorts the reachable graph
// from a scalar root and runs each node's closure once.
namespace ewcdr::ag {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  double item() const;

  void zero_grad();
  // Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// While alive, ops on this thread produce constants and record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active() noexcept;

 private:
  bool previous_;
};

// Wraps an op result. The closure is kept only when grad mode is on and at
// least one input requires a gradient.
Var record(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Accumulates src into the input's gradient when that input wants one.
void accumulate(const std::shared_ptr<Node>& input, const Tensor& src);

}  // namespace ewcdr::ag
