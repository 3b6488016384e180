#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "mcfnet/tensor.hpp"

namespace mcfnet {

/// Append-only record of differentiable operations.
///
/// Every op that consumes at least one tensor requiring grad appends a node
/// whose inputs were produced earlier (or are leaves), so append order is a
/// topological order. backward() walks the nodes once in reverse.
///
/// A graph built with record=false never appends nodes; this is the
/// inference mode. Graph construction and backward are single-threaded.
template <typename T>
class Graph {
 public:
  struct Node {
    std::string op;
    std::vector<std::optional<std::size_t>> inputs;  // node ids; nullopt for leaves
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  /// True when an op over these inputs must be recorded.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!record_) return false;
    for (const auto* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }
  bool needs_grad(const std::vector<Tensor<T>>& inputs) const {
    if (!record_) return false;
    for (const auto& t : inputs) {
      if (t.requires_grad()) return true;
    }
    return false;
  }

  /// Appends a node producing `output`. The backward closure reads
  /// output's gradient and accumulates into inputs that require grad.
  void record(std::string op, const std::vector<Tensor<T>>& inputs, Tensor<T>& output,
              std::function<void()> backward) {
    Node n;
    n.op = std::move(op);
    n.inputs.reserve(inputs.size());
    for (const auto& in : inputs) n.inputs.push_back(in.node_id());
    output.set_requires_grad(true);
    output.set_node_id(nodes_.size());
    n.output = output;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
  }

  /// Reverse-mode sweep from a scalar loss.
  ///
  /// Leaf tensors accumulate into their existing gradient (the caller
  /// zeroes between steps). Intermediate gradients are reset on every call.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    for (auto& n : nodes_) n.output.clear_grad();

    Tensor<T> root = loss;
    auto id = root.node_id();
    if (!id || *id >= nodes_.size() || !nodes_[*id].output.same_storage(root)) {
      // A leaf used directly as the loss.
      root.grad_mut()[0] += T(1);
      return;
    }
    root.grad_mut()[0] = T(1);
    for (std::size_t i = *id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.output.has_grad()) continue;
      n.backward();
    }
  }

 private:
  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace mcfnet
