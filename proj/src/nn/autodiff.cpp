#include "vla3d/nn/autodiff.hpp"

#include <unordered_set>

namespace vla3d::nn {

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

Var Var::leaf(Tensor value, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->param_name = std::move(name);
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) throw shape_error("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion depth limits.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (!n->grad.empty()) n->grad.check_finite(n->param_name.empty() ? "backward pass" : n->param_name.c_str());
  }
}

Var GradTape::bind(const std::string& name, const Tensor& value) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = Var::leaf(value, name);
  bound_.emplace(name, v);
  return v;
}

void GradTape::backward(const Var& loss) {
  nn::backward(loss);
  for (auto& [name, leaf] : bound_) {
    Node& n = *leaf.node();
    if (n.grad.empty()) continue;
    auto [it, inserted] = grads_.try_emplace(name, n.grad);
    if (!inserted) {
      auto& dst = it->second.storage();
      const auto& src = n.grad.storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    n.grad = Tensor();
  }
}

void GradTape::zero_grad() {
  bound_.clear();
  grads_.clear();
}

}  // namespace vla3d::nn
