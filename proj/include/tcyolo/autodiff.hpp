#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tcyolo/parameters.hpp"
#include "tcyolo/tensor.hpp"

namespace tcyolo {

template <typename Scalar>
class Tape;

/// Handle to one value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<Scalar>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(std::size_t axis) const { return value().dim(axis); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, so the node list
/// is already a topological order; backward walks it once in reverse.
template <typename Scalar>
class Tape {
 public:
  /// Receives the node's accumulated output gradient; must add into the
  /// gradients of its inputs through `accumulate`.
  using BackwardFn = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<Scalar> constant(Tensor<Scalar> value) { return push("constant", std::move(value), false); }

  Var<Scalar> variable(Tensor<Scalar> value) {
    return push("variable", std::move(value), grad_enabled_);
  }

  /// Leaf bound to a stored parameter; backward adds into `param.grad`.
  Var<Scalar> parameter(Parameter<Scalar>& param) {
    const bool track = grad_enabled_ && param.trainable();
    Var<Scalar> v = push("parameter", param.value, track);
    if (track) {
      Parameter<Scalar>* target = &param;
      nodes_.back().backward = [target](Tape&, const Tensor<Scalar>& g) {
        target->grad_buffer().values() += g.values();
      };
    }
    return v;
  }

  /// Appends an operator result. `backward` is dropped when no input needs a gradient.
  Var<Scalar> record(std::string op, Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                     BackwardFn backward) {
    bool track = false;
    if (grad_enabled_)
      for (const auto& in : inputs) track = track || requires_grad(in);
    Var<Scalar> v = push(std::move(op), std::move(value), track);
    if (track) {
      auto& node = nodes_.back();
      node.backward = std::move(backward);
      for (const auto& in : inputs) node.inputs.push_back(in.id());
    }
    return v;
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const { return nodes_.at(v.id()).value; }
  const std::string& op(const Var<Scalar>& v) const { return nodes_.at(v.id()).op; }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient reached at `v` by the last backward pass (zeros if unreached).
  Tensor<Scalar> grad(const Var<Scalar>& v) const {
    const auto& node = nodes_.at(v.id());
    if (node.grad.empty()) return Tensor<Scalar>(node.value.shape());
    return node.grad;
  }

  /// Adds `g` into the gradient buffer of `v`; no-op for untracked values.
  void accumulate(const Var<Scalar>& v, const Tensor<Scalar>& g) {
    auto& node = nodes_.at(v.id());
    if (!node.requires_grad) return;
    if (g.shape() != node.value.shape())
      throw DimensionError("gradient shape " + g.shape().str() + " does not match value " +
                           node.value.shape().str() + " at op '" + node.op + "'");
    if (node.grad.empty())
      node.grad = g;
    else
      node.grad.values() += g.values();
  }

  /// Seeds `root` with ones and propagates to every tracked node.
  void backward(const Var<Scalar>& root) {
    backward(root, Tensor<Scalar>(value(root).shape(), Scalar(1)));
  }

  void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed) {
    if (!grad_enabled_) throw ConfigError("backward on a tape recorded without gradient tracking");
    for (auto& n : nodes_) n.grad = Tensor<Scalar>();
    backward_visits_ = 0;
    accumulate(root, seed);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.grad.empty() || !node.backward) continue;
      ++backward_visits_;
      node.backward(*this, node.grad);
    }
  }

  /// Nodes whose backward rule ran during the last backward pass.
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  struct Node {
    std::string op;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var<Scalar> push(std::string op, Tensor<Scalar> value, bool requires_grad) {
    Node node;
    node.op = std::move(op);
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::size_t backward_visits_ = 0;
};

}  // namespace tcyolo
