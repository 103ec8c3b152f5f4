#pragma once

#include "mucp/tensor.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace mucp {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  std::int64_t numel() const { return value().numel(); }
  /// Gradient accumulated on this node by the last backward pass (empty if none).
  std::span<const float> grad() const;
  bool requires_grad() const;

  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Tape of operation records in creation order.
///
/// Creation order is a topological order, so backward() walks the tape in
/// reverse exactly once. Leaf gradients accumulate across backward() calls;
/// interior gradients are reset at the start of each call.
class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const float> grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf owned by the graph; its gradient is read back through Var::grad().
  Var input(Tensor value, bool requires_grad = true);
  /// Leaf aliasing an external tensor; backward() accumulates into tensor.grad()
  /// when tensor.requires_grad() is set. The tensor must outlive the graph.
  Var parameter(Tensor& tensor);

  /// Appends an interior node. `fn` runs during backward with this node's
  /// gradient; it is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const;
  /// Mutable gradient buffer of `v`, allocated on first use; empty when `v`
  /// does not need a gradient.
  std::span<float> grad_buffer(Var v);
  std::span<const float> grad(Var v) const;

  void backward(Var loss);

  /// Disables gradient bookkeeping for nodes recorded afterwards.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    Tensor* external = nullptr;
    FloatBuffer grad;
    bool needs_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::deque<Node> nodes_;  // stable addresses: values stay referenceable while recording
  bool grad_enabled_ = true;
};

}  // namespace mucp
