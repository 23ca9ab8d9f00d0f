#pragma once

// Define-by-run reverse-mode differentiation over dense Eigen matrices.
//
// Values are batches laid out row-major in the mathematical sense: one sample
// per row, one feature per column. Every primitive records its value and a
// closure that pushes the incoming gradient to its parents. A Tape is meant
// to be rebuilt for every optimizer iteration.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wgflow/error.hpp"

namespace wgflow::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Trainable tensor living outside any tape.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  /// Entries are clamped to >= 0 by the owning model after optimizer steps.
  bool nonneg = false;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool nonneg_constraint = false)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())),
        nonneg(nonneg_constraint) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

class Tape;

/// Lightweight handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
    const char* op = "";
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push("constant", std::move(value), false, {}, nullptr); }
  Var constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  /// Leaf whose gradient is tracked (inputs differentiated by tests, Hessians, scores).
  Var variable(Matrix value) { return push("variable", std::move(value), true, {}, nullptr); }

  /// Leaf bound to a Parameter; backward() accumulates into Parameter::grad.
  Var param(Parameter& p) { return push("param", p.value, true, {}, &p); }

  /// Records a primitive. When no parent requires a gradient the node is a constant.
  Var record(const char* op, Matrix value, bool requires_grad, BackwardFn fn) {
    if (!value.allFinite()) {
      throw Error(std::string("non-finite value produced by primitive '") + op + "' at node #" +
                  std::to_string(nodes_.size()));
    }
    return push(op, std::move(value), requires_grad, requires_grad ? std::move(fn) : BackwardFn{},
                nullptr);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const char* op(std::size_t id) const { return nodes_[id].op; }

  /// Adds g into the gradient buffer of node id.
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a scalar output. Gradients from a previous sweep are discarded.
  void backward(Var out, bool accumulate_params = true) {
    if (out.tape() != this) throw Error("backward: output belongs to another tape");
    const Matrix& v = nodes_[out.id()].value;
    if (v.rows() != 1 || v.cols() != 1) {
      throw Error("backward: output must be a scalar, got shape " + std::to_string(v.rows()) + "x" +
                  std::to_string(v.cols()));
    }
    for (Node& n : nodes_) n.has_grad = false;
    accumulate(out.id(), Matrix::Ones(1, 1));
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) {
        // Parents always precede the node, so n.grad is not written during its own sweep.
        n.backward(*this, n.grad);
      } else if (n.param != nullptr && accumulate_params) {
        n.param->grad += n.grad;
      }
    }
  }

  /// Gradient of the last backward() output with respect to v (zeros if unreachable).
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  Var push(const char* op, Matrix value, bool requires_grad, BackwardFn fn, Parameter* p) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    n.param = p;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw Error("Var::scalar on non-scalar node");
  return v(0, 0);
}

namespace detail {

inline void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw Error("operands live on different tapes");
}

inline bool broadcastable(Index from, Index to) { return from == to || from == 1; }

inline Matrix broadcast(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1) return m.replicate(rows, 1);
  return m.replicate(1, cols);
}

/// Sums g over the dimensions along which an operand of shape (rows, cols) was broadcast.
inline Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

inline std::pair<Index, Index> broadcast_shape(const char* op, const Matrix& a, const Matrix& b) {
  const Index r = std::max(a.rows(), b.rows());
  const Index c = std::max(a.cols(), b.cols());
  if (!broadcastable(a.rows(), r) || !broadcastable(a.cols(), c) || !broadcastable(b.rows(), r) ||
      !broadcastable(b.cols(), c)) {
    throw Error(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()));
  }
  return {r, c};
}

template <class Forward, class Derivative>
Var unary(const char* op, Var a, Forward f, Derivative df) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const auto fwd = [f](double v) { return f(v); };
  Matrix out = a.value().unaryExpr(fwd);
  return t.record(op, std::move(out), t.requires_grad(a),
                  [ia, df](Tape& tp, const Matrix& g) {
                    const auto d = [df](double v) { return df(v); };
                    tp.accumulate(ia, g.cwiseProduct(tp.value(ia).unaryExpr(d)));
                  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives (with row / column / scalar broadcasting)

inline Var add(Var a, Var b) {
  detail::check_same_tape(a, b);
  Tape& t = *a.tape();
  const auto [r, c] = detail::broadcast_shape("add", a.value(), b.value());
  Matrix out = detail::broadcast(a.value(), r, c) + detail::broadcast(b.value(), r, c);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    const Matrix& va = tp.value(ia);
                    const Matrix& vb = tp.value(ib);
                    if (tp.requires_grad(ia)) tp.accumulate(ia, detail::reduce_to(g, va.rows(), va.cols()));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, detail::reduce_to(g, vb.rows(), vb.cols()));
                  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_tape(a, b);
  Tape& t = *a.tape();
  const auto [r, c] = detail::broadcast_shape("sub", a.value(), b.value());
  Matrix out = detail::broadcast(a.value(), r, c) - detail::broadcast(b.value(), r, c);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    const Matrix& va = tp.value(ia);
                    const Matrix& vb = tp.value(ib);
                    if (tp.requires_grad(ia)) tp.accumulate(ia, detail::reduce_to(g, va.rows(), va.cols()));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, -detail::reduce_to(g, vb.rows(), vb.cols()));
                  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::check_same_tape(a, b);
  Tape& t = *a.tape();
  const auto [r, c] = detail::broadcast_shape("mul", a.value(), b.value());
  Matrix out = detail::broadcast(a.value(), r, c).cwiseProduct(detail::broadcast(b.value(), r, c));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib, r, c](Tape& tp, const Matrix& g) {
                    const Matrix& va = tp.value(ia);
                    const Matrix& vb = tp.value(ib);
                    if (tp.requires_grad(ia)) {
                      tp.accumulate(ia, detail::reduce_to(g.cwiseProduct(detail::broadcast(vb, r, c)),
                                                          va.rows(), va.cols()));
                    }
                    if (tp.requires_grad(ib)) {
                      tp.accumulate(ib, detail::reduce_to(g.cwiseProduct(detail::broadcast(va, r, c)),
                                                          vb.rows(), vb.cols()));
                    }
                  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  return t.record("scale", a.value() * s, t.requires_grad(a),
                  [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); });
}

inline Var add_scalar(Var a, double s) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix out = a.value().array() + s;
  return t.record("add_scalar", std::move(out), t.requires_grad(a),
                  [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, Var a) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, Var a) { return add_scalar(neg(a), s); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw Error("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  }
  Tape& t = *a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return t.record("matmul", std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                  });
}

/// a * b^T, the usual layout for a batch times a weight matrix (out x in).
inline Var matmul_nt(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw Error("matmul_nt: column counts differ");
  Tape& t = *a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return t.record("matmul_nt", std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
                  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix out = a.value().transpose();
  return t.record("transpose", std::move(out), t.requires_grad(a),
                  [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

/// Affine layer x W^T + b with W of shape (out, in) and b of shape (1, out).
inline Var affine(Var x, Var w, Var b) { return add(matmul_nt(x, w), b); }

// ---------------------------------------------------------------------------
// Activations and pointwise functions

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double v) { return std::exp(v); },
                       [](double v) { return std::exp(v); });
}

inline Var log(Var a) {
  if ((a.value().array() <= 0.0).any()) {
    throw Error("log: non-positive argument at node #" + std::to_string(a.id()));
  }
  return detail::unary("log", a, [](double v) { return std::log(v); },
                       [](double v) { return 1.0 / v; });
}

inline double softplus_value(double v) {
  return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var softplus(Var a) { return detail::unary("softplus", a, [](double v) { return softplus_value(v); }, [](double v) { return sigmoid_value(v); }); }

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double v) {
    const double s = sigmoid_value(v);
    return s * (1.0 - s);
  });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double v) { return v * v; },
                       [](double v) { return 2.0 * v; });
}

/// a^p elementwise; non-integer p requires a > 0.
inline Var pow(Var a, double p) {
  if (p != std::floor(p) && (a.value().array() <= 0.0).any()) {
    throw Error("pow: non-positive base with non-integer exponent at node #" + std::to_string(a.id()));
  }
  return detail::unary("pow", a, [p](double v) { return std::pow(v, p); },
                       [p](double v) { return p * std::pow(v, p - 1.0); });
}

/// CELU(x) = max(0,x) + min(0, alpha (exp(x/alpha) - 1)); convex and nondecreasing.
inline double celu_value(double v, double alpha) {
  return v > 0.0 ? v : alpha * std::expm1(v / alpha);
}
inline double celu_derivative(double v, double alpha) { return v > 0.0 ? 1.0 : std::exp(v / alpha); }
inline double celu_second_derivative(double v, double alpha) {
  return v > 0.0 ? 0.0 : std::exp(v / alpha) / alpha;
}

inline Var celu(Var a, double alpha = 1.0) {
  return detail::unary("celu", a, [alpha](double v) { return celu_value(v, alpha); },
                       [alpha](double v) { return celu_derivative(v, alpha); });
}

/// CELU'(x) as its own primitive so that gradients of gradients (ICNN maps) stay first order.
inline Var celu_grad(Var a, double alpha = 1.0) {
  return detail::unary("celu_grad", a, [alpha](double v) { return celu_derivative(v, alpha); },
                       [alpha](double v) { return celu_second_derivative(v, alpha); });
}

/// Parametric ReLU with a learnable slope of shape (1,1) or (1, cols).
inline Var prelu(Var a, Var slope) {
  detail::check_same_tape(a, slope);
  Tape& t = *a.tape();
  const Index r = a.rows(), c = a.cols();
  if (!(slope.rows() == 1 && (slope.cols() == 1 || slope.cols() == c))) {
    throw Error("prelu: slope must be 1x1 or 1xcols");
  }
  const Matrix s = detail::broadcast(slope.value(), r, c);
  const Matrix& x = a.value();
  Matrix out = (x.array() > 0.0).select(x, s.cwiseProduct(x));
  const std::size_t ia = a.id(), is = slope.id();
  return t.record("prelu", std::move(out), t.requires_grad(a) || t.requires_grad(slope),
                  [ia, is, r, c](Tape& tp, const Matrix& g) {
                    const Matrix& xv = tp.value(ia);
                    const Matrix& sv = tp.value(is);
                    const auto pos = (xv.array() > 0.0);
                    if (tp.requires_grad(ia)) {
                      const Matrix sb = detail::broadcast(sv, r, c);
                      tp.accumulate(ia, pos.select(g, g.cwiseProduct(sb)));
                    }
                    if (tp.requires_grad(is)) {
                      const Matrix gs = pos.select(Matrix::Zero(r, c), g.cwiseProduct(xv));
                      tp.accumulate(is, detail::reduce_to(gs, sv.rows(), sv.cols()));
                    }
                  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return t.record("sum", Matrix::Constant(1, 1, a.value().sum()), t.requires_grad(a),
                  [ia, r, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0))); });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw Error("mean of an empty node");
  return scale(sum(a), 1.0 / n);
}

/// Column sums: (r, c) -> (1, c).
inline Var sum_rows(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const Index r = a.rows();
  Matrix out = a.value().colwise().sum();
  return t.record("sum_rows", std::move(out), t.requires_grad(a),
                  [ia, r](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.replicate(r, 1)); });
}

/// Row sums: (r, c) -> (r, 1).
inline Var sum_cols(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const Index c = a.cols();
  Matrix out = a.value().rowwise().sum();
  return t.record("sum_cols", std::move(out), t.requires_grad(a),
                  [ia, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.replicate(1, c)); });
}

/// Squared Euclidean norm of every row: (r, c) -> (r, 1).
inline Var sqnorm_rows(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix out = a.value().rowwise().squaredNorm();
  return t.record("sqnorm_rows", std::move(out), t.requires_grad(a),
                  [ia](Tape& tp, const Matrix& g) {
                    const Matrix& x = tp.value(ia);
                    tp.accumulate(ia, (2.0 * x.array()).colwise() * g.col(0).array());
                  });
}

inline Var sqnorm(Var a) { return sum(square(a)); }

/// Columns [first, first + count) of a.
inline Var cols(Var a, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > a.cols()) throw Error("cols: slice out of range");
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix out = a.value().middleCols(first, count);
  return t.record("cols", std::move(out), t.requires_grad(a),
                  [ia, r, c, first, count](Tape& tp, const Matrix& g) {
                    Matrix full = Matrix::Zero(r, c);
                    full.middleCols(first, count) = g;
                    tp.accumulate(ia, full);
                  });
}

inline Var col(Var a, Index j) { return cols(a, j, 1); }

/// Horizontal concatenation [a | b].
inline Var hcat(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows()) throw Error("hcat: row counts differ");
  Tape& t = *a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  const Index ca = a.cols(), cb = b.cols();
  Matrix out(a.rows(), ca + cb);
  out << a.value(), b.value();
  return t.record("hcat", std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [ia, ib, ca, cb](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g.leftCols(ca));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, g.rightCols(cb));
                  });
}

/// Scalar field evaluated outside the tape: value (r,1) with gradient (r, c) w.r.t. each row of x.
inline Var field(Var x, Matrix values, Matrix row_gradients, const char* op = "field") {
  if (values.rows() != x.rows() || values.cols() != 1 || row_gradients.rows() != x.rows() ||
      row_gradients.cols() != x.cols()) {
    throw Error(std::string(op) + ": value/gradient shapes do not match the input batch");
  }
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  return t.record(op, std::move(values), t.requires_grad(x),
                  [ix, grads = std::move(row_gradients)](Tape& tp, const Matrix& g) {
                    tp.accumulate(ix, grads.array().colwise() * g.col(0).array());
                  });
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step = 0;
};

inline AdamState make_adam_state(std::span<Parameter* const> params, AdamConfig config = {}) {
  AdamState s;
  s.config = config;
  for (const Parameter* p : params) {
    s.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

/// One bias-corrected Adam update of params along grads (one gradient matrix per parameter).
inline void adam_step(AdamState& state, std::span<Parameter* const> params,
                      std::span<const Matrix> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw Error("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i]->value.rows() || grads[i].cols() != params[i]->value.cols() ||
        state.first_moment[i].rows() != grads[i].rows() ||
        state.first_moment[i].cols() != grads[i].cols()) {
      throw Error("adam_step: shape mismatch for parameter '" + params[i]->name + "'");
    }
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = c.beta1 * m + (1.0 - c.beta1) * grads[i];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[i].cwiseAbs2();
    params[i]->value.array() -=
        c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

/// Adam bound to a fixed parameter list, reading Parameter::grad.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config)
      : params_(std::move(params)), state_(make_adam_state(params_, config)) {}

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step() {
    grads_.clear();
    for (const Parameter* p : params_) grads_.push_back(p->grad);
    adam_step(state_, params_, grads_);
  }

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }

 private:
  std::vector<Parameter*> params_;
  AdamState state_;
  std::vector<Matrix> grads_;
};

// ---------------------------------------------------------------------------
// Finite differences (test oracle)

/// Central-difference gradient of a scalar function.
template <class F>
Vector finite_diff_grad(F&& f, const Vector& point, double step) {
  if (!(step > 0.0)) throw Error("finite_diff_grad: step must be positive");
  Vector g(point.size());
  Vector x = point;
  for (Index i = 0; i < point.size(); ++i) {
    const double orig = x(i);
    x(i) = orig + step;
    const double fp = f(x);
    x(i) = orig - step;
    const double fm = f(x);
    x(i) = orig;
    g(i) = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace wgflow::ad
