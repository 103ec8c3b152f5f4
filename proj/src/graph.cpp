#include "mucp/graph.hpp"

#include "mucp/errors.hpp"

#include <algorithm>

namespace mucp {

const Tensor& Var::value() const { return graph_->value(*this); }

std::span<const float> Var::grad() const { return graph_->grad(*this); }

bool Var::requires_grad() const { return graph_->needs_grad(*this); }

const Graph::Node& Graph::node(Var v) const {
  if (v.graph_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size())
    throw ContractError("variable does not belong to this graph");
  return nodes_[static_cast<std::size_t>(v.id_)];
}

Graph::Node& Graph::node(Var v) { return const_cast<Node&>(static_cast<const Graph*>(this)->node(v)); }

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.owned.set_requires_grad(false);
  n.leaf = true;
  n.needs_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::parameter(Tensor& tensor) {
  Node n;
  n.external = &tensor;
  n.leaf = true;
  n.needs_grad = tensor.requires_grad() && grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  if (grad_enabled_)
    n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [&](Var v) { return needs_grad(v); });
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.owned;
}

bool Graph::needs_grad(Var v) const { return node(v).needs_grad; }

std::span<float> Graph::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.needs_grad) return {};
  if (n.external) return n.external->grad();
  if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.owned.numel()), 0.0f);
  return n.grad;
}

std::span<const float> Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.external) return n.external->grad();
  return n.grad;
}

void Graph::backward(Var loss) {
  if (value(loss).numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
  if (!needs_grad(loss)) return;
  for (auto& n : nodes_)
    if (!n.leaf) n.grad.clear();
  auto seed = grad_buffer(loss);
  seed[0] += 1.0f;
  for (int i = loss.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.leaf || !n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward(std::span<const float>(n.grad));
  }
}

}  // namespace mucp
