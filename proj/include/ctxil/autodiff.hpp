#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape records every primitive in creation order, so node ids are a
// topological order by construction. Tape::backward walks the ids in reverse
// and accumulates gradients into each recorded input, so fan-out sums
// contributions. Only first-order gradients are supported.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ctxil/errors.hpp"
#include "ctxil/tensor.hpp"

namespace ctxil {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient flowing into this node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), nullptr, requires_grad, "leaf");
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of the last backward() loss w.r.t. v (zeros if v was unreachable).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == 0) return Tensor::zeros_like(n.value);
    return n.grad;
  }

  void backward(Var loss) {
    require(loss.tape() == this, "backward: loss belongs to another tape");
    const Node& ln = nodes_.at(loss.id());
    require(ln.value.rank() == 0, "backward: loss must be a scalar, got shape " + shape_str(ln.value.shape()));
    for (Node& n : nodes_) n.grad = Tensor();
    if (!ln.requires_grad) return;
    nodes_[loss.id()].grad = Tensor::scalar(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      const Tensor gout = n.grad;
      n.backward(*this, gout);
    }
  }

  // Records `value` as the output of a primitive over `inputs`. The backward
  // rule is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
    bool needs = false;
    for (Var v : inputs) {
      require(v.tape() == this, std::string(op) + ": operand from another tape");
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs ? std::move(fn) : nullptr, needs, op);
  }

  // Adds g into the gradient of node id (allocated lazily).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
      return;
    }
    double* dst = n.grad.data();
    const double* src = g.data();
    for (std::size_t i = 0, e = n.grad.size(); i < e; ++i) dst[i] += src[i];
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, BackwardFn fn, bool requires_grad, const char* op) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(fn), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_mat(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline Tape& tape_of(Var a, const char* op) {
  require(a.valid(), std::string(op) + ": invalid variable");
  return *a.tape();
}

inline void same_shape(Var a, Var b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_matrix(Var a, const char* op) {
  require(a.shape().size() == 2, std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// Elementwise map with a derivative expressed through input x and output y.
template <class F, class D>
Var elementwise(Var a, const char* op, F f, D dfdx) {
  Tape& tape = tape_of(a, op);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  const std::size_t io = tape.size();
  return tape.record(std::move(y), {a},
                     [ia, io, dfdx](Tape& t, const Tensor& g) {
                       const Tensor& xv = t.value_at(ia);
                       const Tensor& yv = t.value_at(io);
                       Tensor dx(xv.shape());
                       for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = g[i] * dfdx(xv[i], yv[i]);
                       t.accumulate(ia, dx);
                     },
                     op);
}

}  // namespace detail

// ---- linear algebra -------------------------------------------------------

// [n,k] x [k,m] -> [n,m]
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "matmul");
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  require(a.shape()[1] == b.shape()[0],
          "matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c(Shape{a.shape()[0], b.shape()[1]});
  detail::as_mat(c).noalias() = detail::as_mat(a.value()) * detail::as_mat(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(c), {a, b},
                     [ia, ib](Tape& t, const Tensor& g) {
                       const Tensor& av = t.value_at(ia);
                       const Tensor& bv = t.value_at(ib);
                       if (t.needs_grad(ia)) {
                         Tensor da(av.shape());
                         detail::as_mat(da).noalias() = detail::as_mat(g) * detail::as_mat(bv).transpose();
                         t.accumulate(ia, da);
                       }
                       if (t.needs_grad(ib)) {
                         Tensor db(bv.shape());
                         detail::as_mat(db).noalias() = detail::as_mat(av).transpose() * detail::as_mat(g);
                         t.accumulate(ib, db);
                       }
                     },
                     "matmul");
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "add");
  detail::same_shape(a, b, "add");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(c), {a, b},
                     [ia, ib](Tape& t, const Tensor& g) {
                       t.accumulate(ia, g);
                       t.accumulate(ib, g);
                     },
                     "add");
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "sub");
  detail::same_shape(a, b, "sub");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(c), {a, b},
                     [ia, ib](Tape& t, const Tensor& g) {
                       t.accumulate(ia, g);
                       Tensor ng = g;
                       for (double& v : ng.storage()) v = -v;
                       t.accumulate(ib, ng);
                     },
                     "sub");
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "mul");
  detail::same_shape(a, b, "mul");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(c), {a, b},
                     [ia, ib](Tape& t, const Tensor& g) {
                       const Tensor& av = t.value_at(ia);
                       const Tensor& bv = t.value_at(ib);
                       Tensor da(av.shape()), db(bv.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         da[i] = g[i] * bv[i];
                         db[i] = g[i] * av[i];
                       }
                       t.accumulate(ia, da);
                       t.accumulate(ib, db);
                     },
                     "mul");
}

// a[n,m] + b[m] broadcast over rows.
inline Var add_row(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "add_row");
  detail::require_matrix(a, "add_row");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  require(b.value().size() == m && b.shape().size() <= 2 && b.value().rows() == 1,
          "add_row: bias shape " + shape_str(b.shape()) + " does not broadcast over " + shape_str(a.shape()));
  Tensor c = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < m; ++k) c[r * m + k] += b.value()[k];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(c), {a, b},
                     [ia, ib, n, m](Tape& t, const Tensor& g) {
                       t.accumulate(ia, g);
                       Tensor db(t.value_at(ib).shape());
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t k = 0; k < m; ++k) db[k] += g[r * m + k];
                       t.accumulate(ib, db);
                     },
                     "add_row");
}

inline Var scale(Var a, double s) {
  Tape& tape = detail::tape_of(a, "scale");
  Tensor c = a.value();
  for (double& v : c.storage()) v *= s;
  const std::size_t ia = a.id();
  return tape.record(std::move(c), {a},
                     [ia, s](Tape& t, const Tensor& g) {
                       Tensor d = g;
                       for (double& v : d.storage()) v *= s;
                       t.accumulate(ia, d);
                     },
                     "scale");
}

inline Var add_scalar(Var a, double s) {
  Tape& tape = detail::tape_of(a, "add_scalar");
  Tensor c = a.value();
  for (double& v : c.storage()) v += s;
  const std::size_t ia = a.id();
  return tape.record(std::move(c), {a}, [ia](Tape& t, const Tensor& g) { t.accumulate(ia, g); }, "add_scalar");
}

// ---- elementwise nonlinearities ---------------------------------------------

inline Var relu(Var a) {
  return detail::elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var a) {
  return detail::elementwise(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
  return detail::elementwise(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::elementwise(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
  return detail::elementwise(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Hard clamp; gradient passes only strictly inside [lo, hi].
inline Var clamp(Var a, double lo, double hi) {
  return detail::elementwise(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- reductions ---------------------------------------------------------------

inline Var sum(Var a) {
  Tape& tape = detail::tape_of(a, "sum");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(s), {a},
                     [ia](Tape& t, const Tensor& g) {
                       t.accumulate(ia, Tensor(t.value_at(ia).shape(), g.item()));
                     },
                     "sum");
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  require(n > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// [n,m] -> [n,1]
inline Var row_sum(Var a) {
  Tape& tape = detail::tape_of(a, "row_sum");
  detail::require_matrix(a, "row_sum");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor c(Shape{n, 1});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < m; ++k) c[r] += a.value()[r * m + k];
  const std::size_t ia = a.id();
  return tape.record(std::move(c), {a},
                     [ia, n, m](Tape& t, const Tensor& g) {
                       Tensor d(Shape{n, m});
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t k = 0; k < m; ++k) d[r * m + k] = g[r];
                       t.accumulate(ia, d);
                     },
                     "row_sum");
}

// sum((a - b)^2) over all elements.
inline Var squared_l2(Var a, Var b) { return sum(square(sub(a, b))); }

// Per-row squared distance, [n,m] x [n,m] -> [n,1].
inline Var row_squared_l2(Var a, Var b) { return row_sum(square(sub(a, b))); }

// log(sum(exp(a))) over all elements, shifted by the max for stability.
inline Var log_sum_exp(Var a) {
  Tape& tape = detail::tape_of(a, "log_sum_exp");
  const Tensor& x = a.value();
  require(x.size() > 0, "log_sum_exp: empty tensor");
  const double mx = *std::max_element(x.storage().begin(), x.storage().end());
  double s = 0.0;
  for (double v : x.values()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  const std::size_t ia = a.id();
  return tape.record(Tensor::scalar(lse), {a},
                     [ia, lse](Tape& t, const Tensor& g) {
                       const Tensor& xv = t.value_at(ia);
                       Tensor d(xv.shape());
                       for (std::size_t i = 0; i < xv.size(); ++i) d[i] = g.item() * std::exp(xv[i] - lse);
                       t.accumulate(ia, d);
                     },
                     "log_sum_exp");
}

// Smaller of two scalars; the gradient follows the selected operand (ties -> a).
inline Var minimum(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "minimum");
  require(a.shape().empty() && b.shape().empty(), "minimum: operands must be scalars");
  const bool pick_a = a.value().item() <= b.value().item();
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(Tensor::scalar(pick_a ? a.value().item() : b.value().item()), {a, b},
                     [ia, ib, pick_a](Tape& t, const Tensor& g) { t.accumulate(pick_a ? ia : ib, g); }, "minimum");
}

// ---- structural ---------------------------------------------------------------

inline Var reshape(Var a, Shape shape) {
  Tape& tape = detail::tape_of(a, "reshape");
  Tensor c = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record(std::move(c), {a},
                     [ia](Tape& t, const Tensor& g) { t.accumulate(ia, g.reshaped(t.value_at(ia).shape())); },
                     "reshape");
}

// [n,p] ++ [n,q] -> [n,p+q]
inline Var concat_cols(Var a, Var b) {
  Tape& tape = detail::tape_of(a, "concat_cols");
  detail::require_matrix(a, "concat_cols");
  detail::require_matrix(b, "concat_cols");
  require(a.shape()[0] == b.shape()[0], "concat_cols: row counts differ");
  const std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  Tensor c(Shape{n, p + q});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.value().data() + r * p, p, c.data() + r * (p + q));
    std::copy_n(b.value().data() + r * q, q, c.data() + r * (p + q) + p);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(c), {a, b},
                     [ia, ib, n, p, q](Tape& t, const Tensor& g) {
                       Tensor da(Shape{n, p}), db(Shape{n, q});
                       for (std::size_t r = 0; r < n; ++r) {
                         std::copy_n(g.data() + r * (p + q), p, da.data() + r * p);
                         std::copy_n(g.data() + r * (p + q) + p, q, db.data() + r * q);
                       }
                       t.accumulate(ia, da);
                       t.accumulate(ib, db);
                     },
                     "concat_cols");
}

// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = detail::tape_of(a, "slice_cols");
  detail::require_matrix(a, "slice_cols");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  require(begin < end && end <= m, "slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Tensor c(Shape{n, w});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(a.value().data() + r * m + begin, w, c.data() + r * w);
  const std::size_t ia = a.id();
  return tape.record(std::move(c), {a},
                     [ia, n, m, begin, w](Tape& t, const Tensor& g) {
                       Tensor d(Shape{n, m});
                       for (std::size_t r = 0; r < n; ++r) std::copy_n(g.data() + r * w, w, d.data() + r * m + begin);
                       t.accumulate(ia, d);
                     },
                     "slice_cols");
}

// Row gather; a rank-1 input is treated as a single row. Backward scatter-adds.
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  Tape& tape = detail::tape_of(a, "gather_rows");
  require(a.shape().size() == 1 || a.shape().size() == 2, "gather_rows: expected rank 1 or 2");
  const std::size_t rows = a.value().rows(), m = a.value().cols();
  Tensor c(Shape{index.size(), m});
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < rows, "gather_rows: index out of range");
    std::copy_n(a.value().data() + index[r] * m, m, c.data() + r * m);
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(c), {a},
                     [ia, m, index = std::move(index)](Tape& t, const Tensor& g) {
                       Tensor d(t.value_at(ia).shape());
                       for (std::size_t r = 0; r < index.size(); ++r)
                         for (std::size_t k = 0; k < m; ++k) d[index[r] * m + k] += g[r * m + k];
                       t.accumulate(ia, d);
                     },
                     "gather_rows");
}

// Same value, no gradient.
inline Var stop_gradient(Var a) { return detail::tape_of(a, "stop_gradient").constant(a.value()); }

// Forward value of `value_from`, backward gradient routed to `grad_to` only.
inline Var straight_through(Var value_from, Var grad_to) {
  Tape& tape = detail::tape_of(grad_to, "straight_through");
  detail::same_shape(value_from, grad_to, "straight_through");
  const std::size_t ig = grad_to.id();
  return tape.record(value_from.value(), {grad_to}, [ig](Tape& t, const Tensor& g) { t.accumulate(ig, g); },
                     "straight_through");
}

// ---- distributions --------------------------------------------------------------

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

// Diagonal Gaussian log-density per row: [n,d] inputs -> [n,1].
// log_std is clamped to [kLogStdMin, kLogStdMax] before use.
inline Var gaussian_log_prob(Var x, Var mean, Var log_std) {
  detail::same_shape(x, mean, "gaussian_log_prob");
  detail::same_shape(x, log_std, "gaussian_log_prob");
  Var ls = clamp(log_std, kLogStdMin, kLogStdMax);
  Var z = mul(sub(x, mean), exp(scale(ls, -1.0)));
  Var per_dim = add_scalar(sub(scale(square(z), -0.5), ls), -kHalfLog2Pi);
  if (per_dim.shape().size() == 2) return row_sum(per_dim);
  return sum(per_dim);
}

}  // namespace ctxil
