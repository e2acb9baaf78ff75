#include "pointmoment/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include "pointmoment/error.hpp"

namespace pointmoment::ad {
namespace {

// Dense kernels with a fixed summation order per output element, so a row's
// result does not depend on its position, on the other rows or on buffer
// alignment. Inner indices are consumed in groups of four, summed pairwise,
// then added to the accumulator; the tail follows one at a time.

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t k4 = k - k % 4;
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict ci = c + i * n;
    const double* ai = a + i * k;
    std::size_t p = 0;
    for (; p < k4; p += 4) {
      const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const double* __restrict b0 = b + p * n;
      const double* __restrict b1 = b0 + n;
      const double* __restrict b2 = b1 + n;
      const double* __restrict b3 = b2 + n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
    }
    for (; p < k; ++p) {
      const double aip = ai[p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t m4 = m - m % 4;
  std::size_t i = 0;
  for (; i < m4; i += 4) {
    const double* __restrict b0 = b + i * n;
    const double* __restrict b1 = b0 + n;
    const double* __restrict b2 = b1 + n;
    const double* __restrict b3 = b2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a[i * k + p], a1 = a[(i + 1) * k + p], a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
      double* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
    }
  }
  for (; i < m; ++i) {
    const double* __restrict bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T, via an explicit transpose of b.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(a, bt.data(), c, m, n, k);
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

// `local_grad(x, y)` is dy/dx given input x and output y.
template <typename F, typename G>
Var unary(const char* op, const Var& a, F forward, G local_grad) {
  const auto& in = a.value();
  Tensor out(a.shape(), Tensor::Uninitialized{});
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return make_node(op, std::move(out), {a}, [local_grad](Node& n) {
    Node& p = *n.parents[0];
    Tensor& g = p.grad_buffer();
    const double* __restrict x = p.value.raw();
    const double* __restrict y = n.value.raw();
    const double* __restrict up = n.grad.raw();
    double* __restrict gp = g.raw();
    const std::size_t count = g.size();
    for (std::size_t i = 0; i < count; ++i) gp[i] += up[i] * local_grad(x[i], y[i]);
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor(value.shape());
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return Var(std::move(n));
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "parameter";
  n->requires_grad = true;
  return Var(std::move(n));
}

Var make_node(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value in forward pass");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (!loss.valid()) throw UsageError("backward: empty variable");
  if (loss.value().size() != 1) {
    throw UsageError("backward: root must be scalar, got shape " + shape_string(loss.shape()));
  }
  Node& root = loss.node();
  if (root.backward_done) throw UsageError("backward: already called on this graph; reset gradients first");
  root.backward_done = true;
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_node("add", std::move(out), {a, b}, [](Node& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_node("sub", std::move(out), {a, b}, [](Node& n) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      if (!n.parents[k]->requires_grad) continue;
      Tensor& g = n.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_node("mul", std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape("div", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_node("div", std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * n.value[i] / pb.value[i];
    }
  });
}

Var scale(const Var& a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out(Shape{a.shape()[0], b.shape()[1]});
  const std::size_t m = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
  gemm_nn(a.value().raw(), b.value().raw(), out.raw(), m, k, c);
  return make_node("matmul", std::move(out), {a, b}, [m, k, c](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) gemm_nt(n.grad.raw(), pb.value.raw(), pa.grad_buffer().raw(), m, c, k);
    if (pb.requires_grad) gemm_tn(pa.value.raw(), n.grad.raw(), pb.grad_buffer().raw(), m, k, c);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  require_rank("linear", b, 1);
  if (x.shape()[1] != w.shape()[0] || b.shape()[0] != w.shape()[1]) {
    throw ShapeError("linear: incompatible shapes " + shape_string(x.shape()) + " x " + shape_string(w.shape()) +
                     " + " + shape_string(b.shape()));
  }
  const std::size_t m = x.shape()[0], k = x.shape()[1], c = w.shape()[1];
  Tensor out(Shape{m, c}, Tensor::Uninitialized{});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(b.value().raw(), c, out.raw() + i * c);
  gemm_nn(x.value().raw(), w.value().raw(), out.raw(), m, k, c);
  return make_node("linear", std::move(out), {x, w, b}, [m, k, c](Node& n) {
    Node& px = *n.parents[0];
    Node& pw = *n.parents[1];
    Node& pb = *n.parents[2];
    if (px.requires_grad) gemm_nt(n.grad.raw(), pw.value.raw(), px.grad_buffer().raw(), m, c, k);
    if (pw.requires_grad) gemm_tn(px.value.raw(), n.grad.raw(), pw.grad_buffer().raw(), m, k, c);
    if (pb.requires_grad) {
      double* __restrict gb = pb.grad_buffer().raw();
      for (std::size_t i = 0; i < m; ++i) {
        const double* __restrict up = n.grad.raw() + i * c;
        for (std::size_t j = 0; j < c; ++j) gb[j] += up[j];
      }
    }
  });
}

Var transpose(const Var& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
  return make_node("transpose", std::move(out), {a}, [r, c](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g.at(i, j) += n.grad.at(j, i);
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_node("reshape", std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().shape().size() == 2 ? parts.front().shape()[1] : 0;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.shape()[1] != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.shape()[0];
  }
  Tensor out(Shape{rows, cols});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return make_node("concat_rows", std::move(out), parts, [offsets = std::move(offsets)](Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      Node& p = *n.parents[k];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[offsets[k] + i];
    }
  });
}

Var diagonal(const Var& a) {
  require_rank("diagonal", a, 2);
  const std::size_t d = a.shape()[0];
  if (a.shape()[1] != d) throw ShapeError("diagonal: matrix not square " + shape_string(a.shape()));
  Tensor out(Shape{d});
  for (std::size_t i = 0; i < d; ++i) out[i] = a.value().at(i, i);
  return make_node("diagonal", std::move(out), {a}, [d](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < d; ++i) g.at(i, i) += n.grad[i];
  });
}

Var broadcast(const Var& a, const Shape& shape) {
  const Shape& src = a.shape();
  if (src.size() > shape.size()) {
    throw ShapeError("broadcast: cannot broadcast " + shape_string(src) + " to " + shape_string(shape));
  }
  const std::size_t lead = shape.size() - src.size();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] != shape[lead + i] && src[i] != 1) {
      throw ShapeError("broadcast: cannot broadcast " + shape_string(src) + " to " + shape_string(shape));
    }
  }
  const std::size_t total = shape_size(shape);
  // Source index for each output index.
  std::vector<std::size_t> index(total);
  bool trailing_copy = true;
  for (std::size_t i = 0; i < src.size(); ++i) trailing_copy &= src[i] == shape[lead + i];
  if (trailing_copy) {
    const std::size_t period = a.value().size();
    for (std::size_t i = 0; i < total; ++i) index[i] = i % period;
  } else {
    std::vector<std::size_t> src_stride(shape.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
      src_stride[lead + i] = src[i] == 1 ? 0 : stride;
      stride *= src[i];
    }
    std::vector<std::size_t> coord(shape.size(), 0);
    for (std::size_t i = 0; i < total; ++i) {
      std::size_t s = 0;
      for (std::size_t k = 0; k < shape.size(); ++k) s += coord[k] * src_stride[k];
      index[i] = s;
      for (std::size_t k = shape.size(); k-- > 0;) {
        if (++coord[k] < shape[k]) break;
        coord[k] = 0;
      }
    }
  }
  Tensor out(shape);
  for (std::size_t i = 0; i < total; ++i) out[i] = a.value()[index[i]];
  return make_node("broadcast", std::move(out), {a}, [index = std::move(index)](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += n.grad[i];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_node("sum", Tensor::scalar(s), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const double up = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

Var mean(const Var& a) {
  const std::size_t count = a.value().size();
  if (count == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(count));
}

Var sum_over_axis(const Var& a, std::size_t axis) {
  const AxisSplit s = split_axis("sum_over_axis", a.shape(), axis);
  Tensor out(drop_axis(a.shape(), axis));
  const auto& in = a.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.extent + e) * s.inner + i];
  return make_node("sum_over_axis", std::move(out), {a}, [s](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.extent + e) * s.inner + i] += n.grad[o * s.inner + i];
  });
}

Var mean_over_axis(const Var& a, std::size_t axis) {
  const AxisSplit s = split_axis("mean_over_axis", a.shape(), axis);
  if (s.extent == 0) throw ShapeError("mean_over_axis: empty axis");
  return scale(sum_over_axis(a, axis), 1.0 / static_cast<double>(s.extent));
}

Var max_over_axis(const Var& a, std::size_t axis) {
  const AxisSplit s = split_axis("max_over_axis", a.shape(), axis);
  if (s.extent == 0) throw ShapeError("max_over_axis: empty axis");
  Tensor out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> argmax(out.size());
  const auto& in = a.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.extent * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t k = (o * s.extent + e) * s.inner + i;
        if (in[k] > in[best]) best = k;
      }
      out[o * s.inner + i] = in[best];
      argmax[o * s.inner + i] = best;
    }
  }
  return make_node("max_over_axis", std::move(out), {a}, [argmax = std::move(argmax)](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < argmax.size(); ++j) g[argmax[j]] += n.grad[j];
  });
}

}  // namespace pointmoment::ad
