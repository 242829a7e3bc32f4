#include "ewcdr/autograd.hpp"

#include <unordered_set>

#include "ewcdr/errors.hpp"

namespace ewcdr::ag {

namespace {
thread_local bool grad_disabled = false;
}

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->grad = Tensor(node->value.shape(), 0.0);
  return Var(std::move(node));
}

double Var::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor(node_->value.shape(), 0.0);
}

void Var::backward() const {
  if (!node_ || node_->value.size() != 1) throw ShapeError("backward() needs a scalar root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS over interior nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && child->backward && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
  // Interior gradients are scratch space; only leaves keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

NoGradGuard::NoGradGuard() : previous_(grad_disabled) { grad_disabled = true; }
NoGradGuard::~NoGradGuard() { grad_disabled = previous_; }
bool NoGradGuard::active() noexcept { return grad_disabled; }

Var record(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!grad_disabled) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void accumulate(const std::shared_ptr<Node>& input, const Tensor& src) {
  if (!input || !input->requires_grad) return;
  Tensor& g = input->grad_buffer();
  double* dst = g.data();
  const double* s = src.data();
  for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += s[i];
}

}  // namespace ewcdr::ag
