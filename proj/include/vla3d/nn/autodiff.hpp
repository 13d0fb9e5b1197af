#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vla3d/nn/tensor.hpp"

namespace vla3d::nn {

struct Node;
using BackwardFn = std::function<void(Node&)>;

/// One recorded value in the op graph. Parameter leaves carry their name.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  bool requires_grad = false;
  std::string param_name;

  /// Gradient buffer, zero-allocated on first use.
  Tensor& grad_buffer();
};

/// Handle to a graph node. A Var built from a plain Tensor is a constant and
/// never records anything; ops only build closures when some input requires
/// a gradient.
class Var {
 public:
  Var() = default;
  Var(Tensor value);  // NOLINT(google-explicit-constructor): constants convert freely
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var leaf(Tensor value, std::string name = {});

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value); }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse pass from a [1,1] loss. Every reachable node that requires a
/// gradient is visited exactly once, in reverse topological order.
void backward(const Var& loss);

/// Binds named parameters as gradient leaves for one forward pass and
/// accumulates their gradients by name.
class GradTape {
 public:
  /// Leaf for `name`; repeated binds within one pass return the same node.
  Var bind(const std::string& name, const Tensor& value);

  /// Runs the reverse pass and adds leaf gradients into grads().
  void backward(const Var& loss);

  const std::map<std::string, Tensor>& grads() const { return grads_; }
  std::map<std::string, Tensor>& grads() { return grads_; }

  /// Clears accumulated gradients and bound leaves.
  void zero_grad();

 private:
  std::map<std::string, Var> bound_;
  std::map<std::string, Tensor> grads_;
};

}  // namespace vla3d::nn
