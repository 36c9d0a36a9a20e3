#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include "datwep/tensor.hpp"

namespace datwep {

enum class OpKind {
  Leaf,
  Constant,
  Conv2d,
  MaxPool2,
  Upsample2,
  Linear,
  Relu,
  Sigmoid,
  SoftmaxRows,
  Embedding,
  ConcatChannels,
  GlobalAvgPool,
  Mul,
  Add,
  Flatten,
  ChannelAffine,
  BatchNorm,
  GatherRows,
  Sum,
  WeightedSum,
  Blend,
  BceWithLogits,
  WeightedCrossEntropy,
};

class Tape;

/// Handle to a tape node: the node's value plus, after backward(), its gradient.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// backward() walks the nodes once, from the root down to id 0, and
/// accumulates into input gradients. References returned by value() stay valid
/// for the tape's lifetime. Nodes are never mutated after recording
/// except for their gradient buffers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(OpKind::Leaf, std::move(value), {}, true, nullptr); }
  Var constant(Tensor value) { return push(OpKind::Constant, std::move(value), {}, false, nullptr); }

  /// Record an op. The node requires grad iff any input does; `fn` is dropped otherwise.
  Var record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    for (std::size_t in : inputs) rg = rg || nodes_.at(in).requires_grad;
    return push(kind, std::move(value), std::move(inputs), rg, rg ? std::move(fn) : nullptr);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  /// Gradient of the last backward root w.r.t. node `id`; zeros if nothing flowed.
  Tensor grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  /// Mutable gradient buffer for node `id`, allocated on first use. Used by backward fns.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Extra per-node record of discrete branch choices (relu signs, pool argmaxes).
  void set_kink_record(std::size_t id, std::vector<std::uint32_t> record) {
    nodes_.at(id).kinks = std::move(record);
  }

  /// Hash of every branch choice on the tape. Two evaluations with equal
  /// signatures took the same piecewise-smooth branch everywhere.
  std::uint64_t kink_signature() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const Node& n : nodes_) {
      for (std::uint32_t v : n.kinks) {
        h ^= v;
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  void backward(Var root) {
    if (root.value().size() != 1) {
      throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
    }
    backward(root, Tensor(root.shape(), 1.0));
  }

  /// Backward pass seeded with d(objective)/d(root) = seed. Resets all gradients first.
  void backward(Var root, const Tensor& seed) {
    if (root.tape != this) throw std::logic_error("backward root from a different tape");
    if (seed.shape() != root.shape()) throw ShapeError("backward seed shape mismatch");
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor(Shape{0}, std::vector<double>{});
    }
    trace_.clear();
    grad_buffer(root.id) = seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.requires_grad) continue;
      trace_.push_back(i);
      if (n.backward) n.backward(*this, i);
    }
  }

  /// Node ids visited by the most recent backward(), in visit order.
  const std::vector<std::size_t>& backward_trace() const noexcept { return trace_; }

 private:
  struct Node {
    OpKind kind;
    Tensor value;
    Tensor grad{Shape{0}, std::vector<double>{}};
    bool has_grad = false;
    std::vector<std::size_t> inputs;
    bool requires_grad;
    BackwardFn backward;
    std::vector<std::uint32_t> kinks;
  };

  Var push(OpKind kind, Tensor value, std::vector<std::size_t> inputs, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{kind, std::move(value), Tensor(Shape{0}, std::vector<double>{}), false,
                          std::move(inputs), rg, std::move(fn), {}});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // deque: references to recorded values stay valid
  std::vector<std::size_t> trace_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline Tensor Var::grad() const { return tape->grad(id); }

}  // namespace datwep
