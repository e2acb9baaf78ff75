#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Var is a handle to a node in a dynamically built graph. Leaves are either
// constants or parameters (requires_grad). Every op checks shapes when the
// graph is built and checks its forward value for NaN/Inf. backward() walks the
// graph in reverse topological order and accumulates into Node::grad.

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "pointmoment/tensor.hpp"

namespace pointmoment::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something is accumulated into it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
  bool requires_grad = false;
  bool backward_done = false;

  // Gradient buffer for accumulation, zero-initialized on first use.
  Tensor& grad_buffer();
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  // Replaces a leaf's value in place (used by the optimizer).
  Tensor& mutable_value() { return node_->value; }
  void zero_grad() { node_->grad = Tensor(); node_->backward_done = false; }

  Node& node() const { return *node_; }
  const NodePtr& ptr() const { return node_; }

 private:
  NodePtr node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Builds an interior node. `backward` receives the node itself; it reads
// node.grad and accumulates into parents' grad_buffer() for parents that
// require a gradient. Throws NumericError if `value` is not finite.
Var make_node(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

// Accumulates gradients of a scalar `loss` into every reachable node.
// A second call on the same root without zero_grad() is a UsageError.
void backward(const Var& loss);

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);  // derivative at 0 is 0
Var square(const Var& a);
Var sqrt(const Var& a);

// 2-D matrix product.
Var matmul(const Var& a, const Var& b);
// x * w + b with b broadcast over rows; same result as
// add(matmul(x, w), broadcast(b, ...)) in a single node.
Var linear(const Var& x, const Var& w, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
// Concatenates 2-D matrices with equal column counts along axis 0.
Var concat_rows(const std::vector<Var>& parts);
// Diagonal of a square matrix as a vector.
Var diagonal(const Var& a);

// Numpy-style broadcast to `shape` (leading axes added, size-1 axes expanded).
Var broadcast(const Var& a, const Shape& shape);

Var sum(const Var& a);   // -> scalar
Var mean(const Var& a);  // -> scalar
// Reduce one axis, removing it from the shape.
Var sum_over_axis(const Var& a, std::size_t axis);
Var mean_over_axis(const Var& a, std::size_t axis);
// Gradient goes to the first maximal element in index order.
Var max_over_axis(const Var& a, std::size_t axis);

}  // namespace pointmoment::ad
