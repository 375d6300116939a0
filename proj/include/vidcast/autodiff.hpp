#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a handle to a node in a dynamically built graph. Every op records
// its parents and a closure that pushes the node's gradient back to them.
// Nodes that do not depend on any trainable leaf carry no closure, so
// constant subexpressions cost nothing at backward time.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vidcast/tensor.hpp"

namespace vidcast::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_ref() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
  Node& parent(std::size_t i) { return *parents[i]; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool valid() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value[0]; }

  // Gradient accumulated by backward(); zeros if none has reached this node.
  Tensor grad() const {
    return node_->has_grad() ? node_->grad : Tensor::zeros(node_->value.shape());
  }
  Tensor& mutable_grad() { return node_->grad_ref(); }
  void zero_grad() { node_->grad = Tensor(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Build an op node. The closure is dropped when no parent is trainable.
inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// Accumulate d(root)/d(leaf) into every trainable node reachable from root.
// root must hold a single element.
inline void backward(const Var& root) {
  if (!root.requires_grad()) return;
  if (root.size() != 1) throw ShapeError("backward() needs a scalar root");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
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
  root.node()->grad_ref()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
  // Intermediate gradients are not needed once propagated.
  for (Node* n : order)
    if (n->backward) n->grad = Tensor();
}

inline Var stop_gradient(const Var& x) { return Var::constant(x.value()); }

// ---------------------------------------------------------------- elementwise

namespace detail {

template <typename F, typename D>
Var unary(const Var& x, F f, D dfdy) {
  Tensor y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_op(std::move(y), {x}, [dfdy](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * dfdy(p.value[i], self.value[i]);
  });
}

inline void accumulate(Node& p, const Tensor& g, double scale = 1.0) {
  if (!p.requires_grad) return;
  Tensor& dst = p.grad_ref();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

}  // namespace detail

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}
inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}
inline Var leaky_relu(const Var& x, double slope) {
  return detail::unary(x, [slope](double v) { return v > 0 ? v : slope * v; },
                       [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}
inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); },
                       [](double, double y) { return y; });
}
inline Var scale(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}
inline Var add_scalar(const Var& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}
inline Var clamp_min(const Var& x, double lo) {
  return detail::unary(x, [lo](double v) { return v < lo ? lo : v; },
                       [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

inline Var add(const Var& a, const Var& b) {
  a.value().require_same(b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return make_op(std::move(y), {a, b}, [](Node& self) {
    detail::accumulate(self.parent(0), self.grad);
    detail::accumulate(self.parent(1), self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  a.value().require_same(b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    detail::accumulate(self.parent(0), self.grad);
    detail::accumulate(self.parent(1), self.grad, -1.0);
  });
}

inline Var mul(const Var& a, const Var& b) {
  a.value().require_same(b.value(), "mul");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// --------------------------------------------------------------- linear algebra

inline void require_rank(const Var& x, std::size_t r, const char* what) {
  if (x.value().rank() != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(x.shape()));
}

// (m x k) * (k x n)
inline Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor y({m, n});
  as_mat(y, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  return make_op(std::move(y), {a, b}, [m, k, n](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    auto dy = as_mat(self.grad, m, n);
    if (pa.requires_grad)
      as_mat(pa.grad_ref(), m, k).noalias() += dy * as_mat(pb.value, k, n).transpose();
    if (pb.requires_grad)
      as_mat(pb.grad_ref(), k, n).noalias() += as_mat(pa.value, m, k).transpose() * dy;
  });
}

// x (m x in) * W^T (in x out) + b (out); b may be invalid for no bias.
inline Var linear(const Var& x, const Var& w, const Var& b = Var()) {
  require_rank(x, 2, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.value().rank() != 2 || w.dim(1) != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " weight " +
                     shape_str(w.shape()));
  if (b.valid() && b.size() != out) throw ShapeError("linear: bias size mismatch");
  Tensor y({m, out});
  auto ym = as_mat(y, m, out);
  ym.noalias() = as_mat(x.value(), m, in) * as_mat(w.value(), out, in).transpose();
  if (b.valid()) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < out; ++c) y.at(r, c) += b.value()[c];
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return make_op(std::move(y), std::move(parents), [m, in, out](Node& self) {
    Node& px = self.parent(0);
    Node& pw = self.parent(1);
    auto dy = as_mat(self.grad, m, out);
    if (px.requires_grad)
      as_mat(px.grad_ref(), m, in).noalias() += dy * as_mat(pw.value, out, in);
    if (pw.requires_grad)
      as_mat(pw.grad_ref(), out, in).noalias() += dy.transpose() * as_mat(px.value, m, in);
    if (self.parents.size() > 2 && self.parent(2).requires_grad) {
      Tensor& gb = self.parent(2).grad_ref();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < out; ++c) gb[c] += self.grad.at(r, c);
    }
  });
}

inline Var transpose(const Var& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor y({n, m});
  as_mat(y, n, m) = as_mat(x.value(), m, n).transpose();
  return make_op(std::move(y), {x}, [m, n](Node& self) {
    Node& p = self.parent(0);
    if (p.requires_grad) as_mat(p.grad_ref(), m, n) += as_mat(self.grad, n, m).transpose();
  });
}

// y[i][j] = a[i] + b[j] for column vectors a (n x 1), b (m x 1).
inline Var outer_add(const Var& a, const Var& b) {
  const std::size_t n = a.size(), m = b.size();
  Tensor y({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) y.at(i, j) = a.value()[i] + b.value()[j];
  return make_op(std::move(y), {a, b}, [n, m](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_ref();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i] += self.grad.at(i, j);
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_ref();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad.at(i, j);
    }
  });
}

// Diagonal of a square matrix as an (n x 1) column.
inline Var diagonal(const Var& x) {
  require_rank(x, 2, "diagonal");
  const std::size_t n = x.dim(0);
  if (x.dim(1) != n) throw ShapeError("diagonal: matrix not square");
  Tensor y({n, 1});
  for (std::size_t i = 0; i < n; ++i) y[i] = x.value().at(i, i);
  return make_op(std::move(y), {x}, [n](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t i = 0; i < n; ++i) g.at(i, i) += self.grad[i];
  });
}

// Row r of x divided by d[r]; d has one entry per row.
inline Var div_rows(const Var& x, const Var& d) {
  require_rank(x, 2, "div_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (d.size() != m) throw ShapeError("div_rows: divisor length mismatch");
  Tensor y({m, n});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y.at(r, c) = x.value().at(r, c) / d.value()[r];
  return make_op(std::move(y), {x, d}, [m, n](Node& self) {
    Node& px = self.parent(0);
    Node& pd = self.parent(1);
    for (std::size_t r = 0; r < m; ++r) {
      const double inv = 1.0 / pd.value[r];
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double g = self.grad.at(r, c);
        if (px.requires_grad) px.grad_ref().at(r, c) += g * inv;
        acc += g * self.value.at(r, c);
      }
      if (pd.requires_grad) pd.grad_ref()[r] -= acc * inv;
    }
  });
}

// ------------------------------------------------------------------- shaping

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_op(std::move(y), {x}, [](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Concatenate 2-D blocks along columns; all blocks share the row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Tensor y({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c)
        y.at(r, off + c) = parts[k].value().at(r, c);
    off += widths[k];
  }
  return make_op(std::move(y), parts, [m, total, widths](Node& self) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = self.parent(k);
      if (p.requires_grad) {
        Tensor& g = p.grad_ref();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) g.at(r, c) += self.grad.at(r, o + c);
      }
      o += widths[k];
    }
    (void)total;
  });
}

inline Var slice_cols(const Var& x, std::size_t start, std::size_t len) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + len > n) throw ShapeError("slice_cols: out of range");
  Tensor y({m, len});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < len; ++c) y.at(r, c) = x.value().at(r, start + c);
  return make_op(std::move(y), {x}, [m, start, len](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < len; ++c) g.at(r, start + c) += self.grad.at(r, c);
  });
}

// Stack tensors of identical shape along a new leading axis, or concatenate
// along the existing leading axis when `new_axis` is false.
inline Var stack(const std::vector<Var>& parts, bool new_axis = true) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape inner = parts[0].shape();
  std::size_t lead = 0;
  for (const auto& p : parts) {
    if (new_axis) {
      if (p.shape() != inner) throw ShapeError("stack: shape mismatch");
      ++lead;
    } else {
      if (p.value().rank() != inner.size() ||
          !std::equal(inner.begin() + 1, inner.end(), p.shape().begin() + 1))
        throw ShapeError("stack: trailing shape mismatch");
      lead += p.dim(0);
    }
  }
  Shape out;
  if (new_axis) {
    out.push_back(lead);
    out.insert(out.end(), inner.begin(), inner.end());
  } else {
    out = inner;
    out[0] = lead;
  }
  Tensor y(out);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.size(), y.data() + off);
    off += p.size();
  }
  return make_op(std::move(y), parts, [](Node& self) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = self.parent(k);
      if (p.requires_grad) {
        Tensor& g = p.grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[o + i];
      }
      o += p.value.size();
    }
  });
}

// Select index i along the leading axis.
inline Var take(const Var& x, std::size_t i) {
  const Shape& s = x.shape();
  const std::size_t inner = x.size() / s[0];
  if (i >= s[0]) throw ShapeError("take: index out of range");
  Shape out(s.begin() + 1, s.end());
  if (out.empty()) out.push_back(1);
  Tensor y(out);
  std::copy(x.value().data() + i * inner, x.value().data() + (i + 1) * inner, y.data());
  return make_op(std::move(y), {x}, [i, inner](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t k = 0; k < inner; ++k) g[i * inner + k] += self.grad[k];
  });
}

// Gather rows of a 2-D tensor (rows may repeat).
inline Var select_rows(const Var& x, std::vector<std::size_t> rows) {
  require_rank(x, 2, "select_rows");
  const std::size_t n = x.dim(1);
  Tensor y({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ShapeError("select_rows: index out of range");
    for (std::size_t c = 0; c < n; ++c) y.at(r, c) = x.value().at(rows[r], c);
  }
  return make_op(std::move(y), {x}, [rows = std::move(rows), n](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < n; ++c) g.at(rows[r], c) += self.grad.at(r, c);
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& x) {
  return make_op(Tensor::scalar(x.value().sum()), {x}, [](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Var sum_squares(const Var& x) {
  return make_op(Tensor::scalar(x.value().squared_norm()), {x}, [](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.value[i] * self.grad[0];
  });
}

// Squared Euclidean distance between two same-shape tensors.
inline Var squared_distance(const Var& a, const Var& b) { return sum_squares(sub(a, b)); }

// Sum of a list of scalars.
inline Var add_all(const std::vector<Var>& xs) {
  if (xs.empty()) return Var::constant(Tensor::scalar(0.0));
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

// Row-wise softmax of a 2-D tensor.
inline Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor y({m, n});
  for (std::size_t r = 0; r < m; ++r) {
    double mx = x.value().at(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, x.value().at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (y.at(r, c) = std::exp(x.value().at(r, c) - mx));
    for (std::size_t c = 0; c < n; ++c) y.at(r, c) /= z;
  }
  return make_op(std::move(y), {x}, [m, n](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (std::size_t c = 0; c < n; ++c)
        g.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
    }
  });
}

// Mean cross-entropy of row logits against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (labels.size() != m) throw ShapeError("cross_entropy: label count mismatch");
  Tensor prob({m, n});
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    double mx = logits.value().at(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, logits.value().at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(logits.value().at(r, c) - mx);
    for (std::size_t c = 0; c < n; ++c)
      prob.at(r, c) = std::exp(logits.value().at(r, c) - mx) / z;
    loss -= logits.value().at(r, labels[r]) - mx - std::log(z);
  }
  loss /= static_cast<double>(m);
  return make_op(Tensor::scalar(loss), {logits},
                 [prob = std::move(prob), labels, m, n](Node& self) {
                   Node& p = self.parent(0);
                   if (!p.requires_grad) return;
                   Tensor& g = p.grad_ref();
                   const double s = self.grad[0] / static_cast<double>(m);
                   for (std::size_t r = 0; r < m; ++r)
                     for (std::size_t c = 0; c < n; ++c)
                       g.at(r, c) += s * (prob.at(r, c) - (c == labels[r] ? 1.0 : 0.0));
                 });
}

// Mean binary cross-entropy of logits against a constant target in {0,1}.
inline Var bce_with_logits(const Var& logits, double target) {
  const std::size_t n = logits.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits.value()[i];
    loss += std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  return make_op(Tensor::scalar(loss), {logits}, [target, n](Node& self) {
    Node& p = self.parent(0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += s * (sigmoid_value(p.value[i]) - target);
  });
}

}  // namespace vidcast::ad
