#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stpl/diffcore/tensor.hpp"

namespace stpl {

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  /// Gradient accumulated by the last backward pass; empty when none reached this node.
  std::span<const T> grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in creation order, so
/// inputs always precede their consumers and a reverse sweep is a valid
/// topological traversal. A tape is confined to one thread.
template <class T>
class Tape {
 public:
  /// Receives the gradient of the node being processed and scatters it into
  /// the gradient buffers of that node's inputs.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, grad_enabled_ && requires_grad, {}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. The backward closure is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    Node node{std::move(value), {}, false, {}, {}};
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw ContractError("operand recorded on a different tape");
      if (in.id() >= nodes_.size()) throw ContractError("operand does not precede its consumer");
      node.inputs.push_back(in.id());
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    node.requires_grad = node.requires_grad && grad_enabled_;
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  std::span<const T> grad(std::size_t id) const { return nodes_.at(id).grad; }

  /// Zero-initialized gradient buffer of a node, allocated on first touch.
  std::span<T> grad_buffer(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) node.grad.assign(node.value.size(), T{0});
    return node.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. After the call
  /// every requires_grad leaf owns a gradient buffer shaped like its value.
  void backward(const Var<T>& loss) {
    if (consumed_) throw ContractError("tape already consumed; call reset() before reuse");
    if (&loss.tape() != this) throw ContractError("loss recorded on a different tape");
    if (loss.value().size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          to_string(loss.value().shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) {
      allocate_leaf_grads();
      return;
    }
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, std::span<const T>(node.grad));
    }
    allocate_leaf_grads();
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad;
    BackwardFn backward;
    std::vector<std::size_t> inputs;
  };

  void allocate_leaf_grads() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad && nodes_[i].inputs.empty()) grad_buffer(i);
    }
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

}  // namespace stpl
