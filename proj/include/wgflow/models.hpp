#pragma once

// Parametric transport maps and dual potentials.
//
// Every model exposes
//   Var apply(Tape&, Var x)          -- parameters bound as trainable leaves
//   Var apply(Tape&, Var x) const    -- parameters bound as constants
//   Matrix operator()(const Matrix&) -- plain evaluation
//   std::vector<Parameter*> parameters()
// and serializes to a JSON checkpoint (architecture descriptor + flat
// parameter vector).

#include <nlohmann/json.hpp>

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "wgflow/autodiff.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/random.hpp"

namespace wgflow::models {

using ad::Parameter;
using ad::Tape;
using ad::Var;
using json = nlohmann::json;

namespace detail {

inline Matrix uniform_init(Rng& rng, Index rows, Index cols, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Matrix positive_init(Rng& rng, Index rows, Index cols, double bound) {
  std::uniform_real_distribution<double> dist(0.0, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

/// Parameter binder: trainable leaves for mutable models, constants otherwise.
struct TrainableBinder {
  Tape& tape;
  Var operator()(Parameter& p) const { return tape.param(p); }
};
struct ConstantBinder {
  Tape& tape;
  Var operator()(const Parameter& p) const { return tape.constant(p.value); }
};

inline std::vector<double> flatten(const std::vector<Parameter>& params) {
  std::vector<double> flat;
  for (const Parameter& p : params)
    for (Index i = 0; i < p.value.rows(); ++i)
      for (Index j = 0; j < p.value.cols(); ++j) flat.push_back(p.value(i, j));
  return flat;
}

inline void unflatten(std::vector<Parameter>& params, const std::vector<double>& flat) {
  std::size_t expected = 0;
  for (const Parameter& p : params) expected += static_cast<std::size_t>(p.value.size());
  if (flat.size() != expected) {
    throw InvalidArgument("checkpoint parameter count " + std::to_string(flat.size()) +
                          " does not match architecture (" + std::to_string(expected) + ")");
  }
  std::size_t k = 0;
  for (Parameter& p : params)
    for (Index i = 0; i < p.value.rows(); ++i)
      for (Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = flat[k++];
}

inline std::vector<Parameter*> pointers(std::vector<Parameter>& params) {
  std::vector<Parameter*> out;
  for (Parameter& p : params) out.push_back(&p);
  return out;
}

inline void require_dim(const Var& x, Index n, const char* who) {
  if (x.cols() != n) {
    throw InvalidArgument(std::string(who) + ": point dimension " + std::to_string(x.cols()) +
                          " differs from model dimension " + std::to_string(n));
  }
}

template <class Model>
Matrix evaluate(const Model& model, const Matrix& x) {
  Tape t;
  return model.apply(t, t.constant(x)).value();
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// T(x) = x + net(x); the last linear layer starts at zero so T starts at the identity.
class ResidualMap {
 public:
  struct Config {
    Index dim = 2;
    std::vector<Index> hidden = {16, 16, 16};
    double prelu_slope = 0.25;
  };

  ResidualMap() = default;
  ResidualMap(Config cfg, Rng& rng) : cfg_(std::move(cfg)) {
    Index in = cfg_.dim;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      const Index out = cfg_.hidden[l];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      params_.emplace_back("W" + std::to_string(l), detail::uniform_init(rng, out, in, bound));
      params_.emplace_back("b" + std::to_string(l), detail::uniform_init(rng, 1, out, bound));
      params_.emplace_back("slope" + std::to_string(l), Matrix::Constant(1, 1, cfg_.prelu_slope));
      in = out;
    }
    params_.emplace_back("W_out", Matrix::Zero(cfg_.dim, in));
    params_.emplace_back("b_out", Matrix::Zero(1, cfg_.dim));
  }

  Index dim() const { return cfg_.dim; }
  const Config& config() const { return cfg_; }

  Var apply(Tape& t, Var x) { return apply_impl(t, x, detail::TrainableBinder{t}, params_); }
  Var apply(Tape& t, Var x) const { return apply_impl(t, x, detail::ConstantBinder{t}, params_); }
  Matrix operator()(const Matrix& x) const { return detail::evaluate(*this, x); }

  std::vector<Parameter*> parameters() { return detail::pointers(params_); }
  const std::vector<Parameter>& parameter_list() const { return params_; }

  json to_json() const {
    return {{"type", "residual"},
            {"dim", cfg_.dim},
            {"hidden", cfg_.hidden},
            {"prelu_slope", cfg_.prelu_slope},
            {"parameters", detail::flatten(params_)}};
  }
  static ResidualMap from_json(const json& j) {
    Config cfg;
    cfg.dim = j.at("dim").get<Index>();
    cfg.hidden = j.at("hidden").get<std::vector<Index>>();
    cfg.prelu_slope = j.value("prelu_slope", 0.25);
    Rng rng(0);
    ResidualMap m(cfg, rng);
    detail::unflatten(m.params_, j.at("parameters").get<std::vector<double>>());
    return m;
  }

 private:
  template <class Binder, class Params>
  Var apply_impl(Tape&, Var x, Binder bind, Params& params) const {
    detail::require_dim(x, cfg_.dim, "ResidualMap");
    Var h = x;
    std::size_t k = 0;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      Var w = bind(params[k]), b = bind(params[k + 1]), s = bind(params[k + 2]);
      k += 3;
      h = ad::prelu(ad::affine(h, w, b), s);
    }
    Var w = bind(params[k]), b = bind(params[k + 1]);
    return ad::add(x, ad::affine(h, w, b));
  }

  Config cfg_;
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------

/// T(x) = x W^T + b, initialized to the identity. With shift_only, W is fixed to I.
class AffineMap {
 public:
  AffineMap() = default;
  explicit AffineMap(Index dim, bool shift_only = false) : dim_(dim), shift_only_(shift_only) {
    if (!shift_only_) params_.emplace_back("W", Matrix::Identity(dim, dim));
    params_.emplace_back("b", Matrix::Zero(1, dim));
  }

  Index dim() const { return dim_; }
  bool shift_only() const { return shift_only_; }

  Var apply(Tape& t, Var x) { return apply_impl(t, x, detail::TrainableBinder{t}, params_); }
  Var apply(Tape& t, Var x) const { return apply_impl(t, x, detail::ConstantBinder{t}, params_); }
  Matrix operator()(const Matrix& x) const { return detail::evaluate(*this, x); }

  Matrix linear() const { return shift_only_ ? Matrix::Identity(dim_, dim_) : params_[0].value; }
  RowVector shift() const { return params_.back().value; }

  std::vector<Parameter*> parameters() { return detail::pointers(params_); }
  const std::vector<Parameter>& parameter_list() const { return params_; }

  json to_json() const {
    return {{"type", "affine"}, {"dim", dim_}, {"shift_only", shift_only_}, {"parameters", detail::flatten(params_)}};
  }
  static AffineMap from_json(const json& j) {
    AffineMap m(j.at("dim").get<Index>(), j.value("shift_only", false));
    detail::unflatten(m.params_, j.at("parameters").get<std::vector<double>>());
    return m;
  }

 private:
  template <class Binder, class Params>
  Var apply_impl(Tape&, Var x, Binder bind, Params& params) const {
    detail::require_dim(x, dim_, "AffineMap");
    if (shift_only_) return ad::add(x, bind(params[0]));
    return ad::affine(x, bind(params[0]), bind(params[1]));
  }

  Index dim_ = 0;
  bool shift_only_ = false;
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------

/// Strongly convex input-convex potential
///
///   phi(x) = s/2 |x|^2 + 1/2 |L x|^2 + c^T x + w_out^T z_K(x)
///   z_1 = celu(A_0 x + b_0),  z_{l+1} = celu(W_l z_l + A_l x + b_l)
///
/// with W_l >= 0 and w_out >= 0 (z-path), so phi is convex and its Hessian is
/// bounded below by s I. The transport map is T = grad phi, built explicitly
/// from primitives so that training it needs only first-order reverse mode.
/// Initialization: w_out = 0, c = 0 and L = sqrt(1 - s) I, hence T = identity.
class ConvexPotential {
 public:
  struct Config {
    Index dim = 1;
    std::vector<Index> hidden = {16, 16};
    double strong_convexity = 0.01;
    double celu_alpha = 1.0;
  };

  ConvexPotential() = default;
  ConvexPotential(Config cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (!(cfg_.strong_convexity > 0.0)) throw InvalidArgument("ConvexPotential: strong convexity s must be > 0");
    if (cfg_.hidden.empty()) throw InvalidArgument("ConvexPotential: at least one hidden layer is required");
    const Index n = cfg_.dim;
    const double bx = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      const Index out = cfg_.hidden[l];
      params_.emplace_back("A" + std::to_string(l), detail::uniform_init(rng, out, n, bx));
      params_.emplace_back("b" + std::to_string(l), detail::uniform_init(rng, 1, out, bx));
      if (l > 0) {
        const Index in = cfg_.hidden[l - 1];
        params_.emplace_back("Wz" + std::to_string(l), detail::positive_init(rng, out, in, 1.0 / static_cast<double>(in)),
                             true);
      }
    }
    params_.emplace_back("w_out", Matrix::Zero(1, cfg_.hidden.back()), true);
    params_.emplace_back("c", Matrix::Zero(1, n));
    const double quad = std::max(0.0, 1.0 - cfg_.strong_convexity);
    params_.emplace_back("L", std::sqrt(quad) * Matrix::Identity(n, n));
  }

  /// phi(x) = 1/2 x^T S x + c^T x + s/2 |x|^2 with all network weights zero; S must be PSD.
  /// s = 0 is accepted here (test mode) as long as S itself is positive definite.
  static ConvexPotential quadratic(const Matrix& S, const RowVector& c, double s) {
    if (s < 0.0) throw InvalidArgument("ConvexPotential: s must be >= 0");
    Config cfg;
    cfg.dim = S.rows();
    cfg.hidden = {1};
    cfg.strong_convexity = 1.0;
    Rng rng(0);
    ConvexPotential p(cfg, rng);
    p.cfg_.strong_convexity = s;
    for (Parameter& q : p.params_) q.value.setZero();
    p.param("c").value = c;
    // L^T L = S via the symmetric square root.
    p.param("L").value = symmetric_matrix_function(S, [](double v) { return std::sqrt(std::max(v, 0.0)); });
    return p;
  }

  Index dim() const { return cfg_.dim; }
  const Config& config() const { return cfg_; }
  double strong_convexity() const { return cfg_.strong_convexity; }

  /// The transport map T(x) = grad phi(x).
  Var apply(Tape& t, Var x) { return gradient_impl(t, x, detail::TrainableBinder{t}, params_); }
  Var apply(Tape& t, Var x) const { return gradient_impl(t, x, detail::ConstantBinder{t}, params_); }
  Matrix operator()(const Matrix& x) const { return detail::evaluate(*this, x); }

  Var gradient(Tape& t, Var x) const { return apply(t, x); }

  /// phi(x) for every row: (M, 1).
  Var potential(Tape& t, Var x) const { return potential_impl(t, x, detail::ConstantBinder{t}, params_); }
  Vector potential(const Matrix& x) const {
    Tape t;
    return potential(t, t.constant(x)).value().col(0);
  }

  /// Clamps every z-path weight to be nonnegative.
  void project_nonneg() {
    for (Parameter& p : params_)
      if (p.nonneg) p.value = p.value.cwiseMax(0.0);
  }

  std::vector<Parameter*> parameters() { return detail::pointers(params_); }
  const std::vector<Parameter>& parameter_list() const { return params_; }

  Parameter& param(const std::string& name) {
    for (Parameter& p : params_)
      if (p.name == name) return p;
    throw Error("ConvexPotential: no parameter named " + name);
  }
  const Parameter& param(const std::string& name) const {
    return const_cast<ConvexPotential*>(this)->param(name);
  }

  json to_json() const {
    return {{"type", "icnn"},
            {"dim", cfg_.dim},
            {"hidden", cfg_.hidden},
            {"strong_convexity", cfg_.strong_convexity},
            {"celu_alpha", cfg_.celu_alpha},
            {"parameters", detail::flatten(params_)}};
  }
  static ConvexPotential from_json(const json& j) {
    Config cfg;
    cfg.dim = j.at("dim").get<Index>();
    cfg.hidden = j.at("hidden").get<std::vector<Index>>();
    cfg.strong_convexity = j.at("strong_convexity").get<double>();
    cfg.celu_alpha = j.value("celu_alpha", 1.0);
    const double s = cfg.strong_convexity;
    if (s < 0.0) throw InvalidArgument("ConvexPotential: s must be >= 0");
    cfg.strong_convexity = s > 0.0 ? s : 1.0;
    Rng rng(0);
    ConvexPotential p(cfg, rng);
    p.cfg_.strong_convexity = s;
    detail::unflatten(p.params_, j.at("parameters").get<std::vector<double>>());
    return p;
  }

 private:
  struct Layout {
    std::vector<std::size_t> a, b, wz;  // wz[0] unused
    std::size_t w_out, c, L;
  };

  Layout layout() const {
    Layout lay;
    std::size_t k = 0;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      lay.a.push_back(k++);
      lay.b.push_back(k++);
      lay.wz.push_back(l > 0 ? k++ : 0);
    }
    lay.w_out = k++;
    lay.c = k++;
    lay.L = k++;
    return lay;
  }

  template <class Binder, class Params>
  Var potential_impl(Tape&, Var x, Binder bind, Params& params) const {
    detail::require_dim(x, cfg_.dim, "ConvexPotential");
    const Layout lay = layout();
    const double alpha = cfg_.celu_alpha;
    Var z;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      Var pre = ad::affine(x, bind(params[lay.a[l]]), bind(params[lay.b[l]]));
      if (l > 0) pre = ad::add(pre, ad::matmul_nt(z, bind(params[lay.wz[l]])));
      z = ad::celu(pre, alpha);
    }
    Var net = ad::matmul_nt(z, bind(params[lay.w_out]));
    Var lin = ad::matmul_nt(x, bind(params[lay.c]));
    Var lx = ad::matmul_nt(x, bind(params[lay.L]));
    Var quad = ad::scale(ad::sqnorm_rows(lx), 0.5);
    Var iso = ad::scale(ad::sqnorm_rows(x), 0.5 * cfg_.strong_convexity);
    return ad::add(ad::add(net, lin), ad::add(quad, iso));
  }

  template <class Binder, class Params>
  Var gradient_impl(Tape&, Var x, Binder bind, Params& params) const {
    detail::require_dim(x, cfg_.dim, "ConvexPotential");
    const Layout lay = layout();
    const double alpha = cfg_.celu_alpha;
    const std::size_t depth = cfg_.hidden.size();
    std::vector<Var> a(depth), wz(depth), pre(depth);
    Var z;
    for (std::size_t l = 0; l < depth; ++l) {
      a[l] = bind(params[lay.a[l]]);
      pre[l] = ad::affine(x, a[l], bind(params[lay.b[l]]));
      if (l > 0) {
        wz[l] = bind(params[lay.wz[l]]);
        pre[l] = ad::add(pre[l], ad::matmul_nt(z, wz[l]));
      }
      if (l + 1 < depth) z = ad::celu(pre[l], alpha);
    }
    // Reverse sweep written out as forward primitives.
    Var upstream = bind(params[lay.w_out]);  // (1, width) broadcast over the batch
    Var grad;
    for (std::size_t l = depth; l-- > 0;) {
      Var delta = ad::mul(ad::celu_grad(pre[l], alpha), upstream);
      Var contrib = ad::matmul(delta, a[l]);
      grad = (l + 1 == depth) ? contrib : ad::add(grad, contrib);
      if (l > 0) upstream = ad::matmul(delta, wz[l]);
    }
    Var c = bind(params[lay.c]);
    Var L = bind(params[lay.L]);
    Var quad = ad::matmul(ad::matmul_nt(x, L), L);
    Var iso = ad::scale(x, cfg_.strong_convexity);
    return ad::add(ad::add(grad, c), ad::add(quad, iso));
  }

  Config cfg_;
  std::vector<Parameter> params_;
};

/// Hessian of a potential at a single point by differentiating each gradient coordinate.
/// Works for any type with `Var gradient(Tape&, Var) const`.
template <class Potential>
Matrix potential_hessian(const Potential& potential, const Vector& x) {
  Tape t;
  Var xv = t.variable(x.transpose());
  Var g = potential.gradient(t, xv);
  const Index n = x.size();
  Matrix h(n, n);
  for (Index k = 0; k < n; ++k) {
    t.backward(ad::col(g, k), false);
    h.row(k) = t.grad(xv);
  }
  const double asym = (h - h.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-6 * (1.0 + h.cwiseAbs().maxCoeff())) {
    throw Error("potential Hessian is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
  return 0.5 * (h + h.transpose());
}

inline Matrix icnn_hessian(const ConvexPotential& potential, const Vector& x) {
  return potential_hessian(potential, x);
}

inline Vector icnn_gradient(const ConvexPotential& potential, const Vector& x) {
  return potential(Matrix(x.transpose())).row(0).transpose();
}

// ---------------------------------------------------------------------------

enum class OutputTransform { Softplus, Square, Sigmoid, ExpShift, Identity };

inline std::string to_string(OutputTransform t) {
  switch (t) {
    case OutputTransform::Softplus: return "softplus";
    case OutputTransform::Square: return "square";
    case OutputTransform::Sigmoid: return "sigmoid";
    case OutputTransform::ExpShift: return "exp_shift";
    case OutputTransform::Identity: return "identity";
  }
  return "?";
}

inline OutputTransform output_transform_from_string(const std::string& s) {
  if (s == "softplus") return OutputTransform::Softplus;
  if (s == "square") return OutputTransform::Square;
  if (s == "sigmoid") return OutputTransform::Sigmoid;
  if (s == "exp_shift") return OutputTransform::ExpShift;
  if (s == "identity") return OutputTransform::Identity;
  throw InvalidArgument("unknown dual output transform '" + s + "'");
}

/// Dual test function h: MLP with PReLU activations followed by an output transform.
///   softplus, square -> h > 0 (density-ratio duals)
///   sigmoid          -> h in (0, 1) (discriminator)
///   exp_shift        -> h = exp(hbar) - 1 > -1
///   identity         -> unconstrained (restricted-divergence network class)
class DualPotential {
 public:
  struct Config {
    Index dim = 2;
    std::vector<Index> hidden = {16, 16};
    OutputTransform transform = OutputTransform::Softplus;
    double prelu_slope = 0.25;
  };

  DualPotential() = default;
  DualPotential(Config cfg, Rng& rng) : cfg_(std::move(cfg)) {
    Index in = cfg_.dim;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      const Index out = cfg_.hidden[l];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      params_.emplace_back("W" + std::to_string(l), detail::uniform_init(rng, out, in, bound));
      params_.emplace_back("b" + std::to_string(l), detail::uniform_init(rng, 1, out, bound));
      params_.emplace_back("slope" + std::to_string(l), Matrix::Constant(1, 1, cfg_.prelu_slope));
      in = out;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    params_.emplace_back("W_out", detail::uniform_init(rng, 1, in, bound));
    params_.emplace_back("b_out", Matrix::Zero(1, 1));
  }

  Index dim() const { return cfg_.dim; }
  OutputTransform transform() const { return cfg_.transform; }
  const Config& config() const { return cfg_; }

  Var apply(Tape& t, Var z) { return transform_output(raw_impl(t, z, detail::TrainableBinder{t}, params_)); }
  Var apply(Tape& t, Var z) const { return transform_output(raw_impl(t, z, detail::ConstantBinder{t}, params_)); }
  Matrix operator()(const Matrix& z) const { return detail::evaluate(*this, z); }

  /// log h, computed stably where the transform allows it.
  Var log_apply(Tape& t, Var z) { return log_transform(raw_impl(t, z, detail::TrainableBinder{t}, params_)); }
  Var log_apply(Tape& t, Var z) const {
    return log_transform(raw_impl(t, z, detail::ConstantBinder{t}, params_));
  }

  /// log(1 - h), stable for the sigmoid transform.
  Var log_complement_apply(Tape& t, Var z) {
    return log_complement(raw_impl(t, z, detail::TrainableBinder{t}, params_));
  }
  Var log_complement_apply(Tape& t, Var z) const {
    return log_complement(raw_impl(t, z, detail::ConstantBinder{t}, params_));
  }

  std::vector<Parameter*> parameters() { return detail::pointers(params_); }
  const std::vector<Parameter>& parameter_list() const { return params_; }

  json to_json() const {
    return {{"type", "mlp_dual"},
            {"dim", cfg_.dim},
            {"hidden", cfg_.hidden},
            {"transform", to_string(cfg_.transform)},
            {"prelu_slope", cfg_.prelu_slope},
            {"parameters", detail::flatten(params_)}};
  }
  static DualPotential from_json(const json& j) {
    Config cfg;
    cfg.dim = j.at("dim").get<Index>();
    cfg.hidden = j.at("hidden").get<std::vector<Index>>();
    cfg.transform = output_transform_from_string(j.at("transform").get<std::string>());
    cfg.prelu_slope = j.value("prelu_slope", 0.25);
    Rng rng(0);
    DualPotential d(cfg, rng);
    detail::unflatten(d.params_, j.at("parameters").get<std::vector<double>>());
    return d;
  }

 private:
  template <class Binder, class Params>
  Var raw_impl(Tape&, Var z, Binder bind, Params& params) const {
    detail::require_dim(z, cfg_.dim, "DualPotential");
    Var h = z;
    std::size_t k = 0;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      Var w = bind(params[k]), b = bind(params[k + 1]), s = bind(params[k + 2]);
      k += 3;
      h = ad::prelu(ad::affine(h, w, b), s);
    }
    return ad::affine(h, bind(params[k]), bind(params[k + 1]));
  }

  Var transform_output(Var raw) const {
    switch (cfg_.transform) {
      case OutputTransform::Softplus: return ad::softplus(raw);
      case OutputTransform::Square: return ad::square(raw);
      case OutputTransform::Sigmoid: return ad::sigmoid(raw);
      case OutputTransform::ExpShift: return ad::add_scalar(ad::exp(raw), -1.0);
      case OutputTransform::Identity: return raw;
    }
    throw Error("unreachable");
  }

  Var log_transform(Var raw) const {
    if (cfg_.transform == OutputTransform::Sigmoid) {
      // log sigmoid(r) = -softplus(-r)
      return ad::neg(ad::softplus(ad::neg(raw)));
    }
    return ad::log(transform_output(raw));
  }

  Var log_complement(Var raw) const {
    if (cfg_.transform == OutputTransform::Sigmoid) return ad::neg(ad::softplus(raw));
    return ad::log(ad::sub(raw.tape()->constant(1.0), transform_output(raw)));
  }

  Config cfg_;
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------

/// h(z) = exp(z^T D z + alpha^T z + gamma); exp-linear when `quadratic` is false.
/// Initialized to h = 1. Its expectation under a Gaussian is available in closed form.
class ExpQuadraticDual {
 public:
  ExpQuadraticDual() = default;
  explicit ExpQuadraticDual(Index dim, bool quadratic = true) : dim_(dim), quadratic_(quadratic) {
    params_.emplace_back("alpha", Matrix::Zero(1, dim));
    params_.emplace_back("gamma", Matrix::Zero(1, 1));
    if (quadratic_) params_.emplace_back("D", Matrix::Zero(dim, dim));
  }

  Index dim() const { return dim_; }
  bool quadratic() const { return quadratic_; }

  Var log_apply(Tape& t, Var z) { return exponent_impl(t, z, detail::TrainableBinder{t}, params_); }
  Var log_apply(Tape& t, Var z) const { return exponent_impl(t, z, detail::ConstantBinder{t}, params_); }
  Var apply(Tape& t, Var z) { return ad::exp(log_apply(t, z)); }
  Var apply(Tape& t, Var z) const { return ad::exp(log_apply(t, z)); }
  Matrix operator()(const Matrix& z) const { return detail::evaluate(*this, z); }

  /// E_{z ~ N(mean, cov)}[h(z)] as a differentiable (1,1) node.
  Var gaussian_expectation(Tape& t, const Gaussian& g) {
    return expectation_impl(t, g, detail::TrainableBinder{t}, params_);
  }
  Var gaussian_expectation(Tape& t, const Gaussian& g) const {
    return expectation_impl(t, g, detail::ConstantBinder{t}, params_);
  }

  RowVector alpha() const { return params_[0].value; }
  double gamma() const { return params_[1].value(0, 0); }
  Matrix quadratic_form() const {
    return quadratic_ ? Matrix(0.5 * (params_[2].value + params_[2].value.transpose())) : Matrix::Zero(dim_, dim_);
  }
  void set(const RowVector& alpha, double gamma) {
    params_[0].value = alpha;
    params_[1].value(0, 0) = gamma;
  }

  std::vector<Parameter*> parameters() { return detail::pointers(params_); }
  const std::vector<Parameter>& parameter_list() const { return params_; }

  json to_json() const {
    return {{"type", "exp_quadratic_dual"}, {"dim", dim_}, {"quadratic", quadratic_}, {"parameters", detail::flatten(params_)}};
  }
  static ExpQuadraticDual from_json(const json& j) {
    ExpQuadraticDual d(j.at("dim").get<Index>(), j.value("quadratic", true));
    detail::unflatten(d.params_, j.at("parameters").get<std::vector<double>>());
    return d;
  }

 private:
  template <class Binder, class Params>
  Var exponent_impl(Tape&, Var z, Binder bind, Params& params) const {
    detail::require_dim(z, dim_, "ExpQuadraticDual");
    Var e = ad::add(ad::matmul_nt(z, bind(params[0])), bind(params[1]));
    if (quadratic_) {
      Var d = bind(params[2]);
      Var dsym = ad::scale(ad::add(d, ad::transpose(d)), 0.5);
      e = ad::add(e, ad::sum_cols(ad::mul(ad::matmul(z, dsym), z)));
    }
    return e;
  }

  // For u = z - m ~ N(0, S):  z^T D z + a^T z + g = u^T D u + bvec^T u + c0 with
  // bvec = a + 2 D m, c0 = m^T D m + a^T m + g. With Lambda = S^{-1} - 2 D (must be PD),
  //   log E = c0 + 1/2 bvec^T Lambda^{-1} bvec - 1/2 log det(S) - 1/2 log det(Lambda).
  template <class Binder, class Params>
  Var expectation_impl(Tape& t, const Gaussian& g, Binder bind, Params& params) const {
    if (g.dim() != dim_) throw InvalidArgument("ExpQuadraticDual: Gaussian dimension mismatch");
    Var a = bind(params[0]);
    Var gm = bind(params[1]);
    const Vector m = g.mean;
    const auto s_llt = spd_cholesky(g.cov, "reference covariance");
    const Matrix s_inv = s_llt.solve(Matrix::Identity(dim_, dim_));
    const Matrix dval = quadratic_ ? quadratic_form() : Matrix::Zero(dim_, dim_);
    const Matrix lambda = s_inv - 2.0 * dval;
    Eigen::LLT<Matrix> l_llt(0.5 * (lambda + lambda.transpose()));
    if (l_llt.info() != Eigen::Success) {
      throw Error("ExpQuadraticDual: E[h] is infinite (S^{-1} - 2D is not positive definite)");
    }
    const Matrix lambda_inv = l_llt.solve(Matrix::Identity(dim_, dim_));
    const Vector bvec = a.value().transpose() + 2.0 * dval * m;
    const Vector lb = lambda_inv * bvec;
    const double c0 = m.dot(dval * m) + a.value().row(0).dot(m) + gm.value()(0, 0);
    const double log_e = c0 + 0.5 * bvec.dot(lb) - 0.5 * log_det_spd(s_llt) - 0.5 * log_det_spd(l_llt);
    const double e = std::exp(log_e);
    // Gradients of E: dE/da = E (m + lb); dE/dg = E; dE/dD = E (m m^T + 2 lb m^T... symmetrized) + E Lambda^{-1}
    const Matrix grad_a = e * (m + lb).transpose();
    Matrix grad_d = Matrix::Zero(dim_, dim_);
    if (quadratic_) {
      // d c0 = m^T dD m ; d(1/2 b^T Li b) through b: lb^T (2 dD m) ; through Lambda: lb^T dD lb ;
      // d(-1/2 log det Lambda) = tr(Li dD).
      const Matrix gsym = m * m.transpose() + lb * m.transpose() + m * lb.transpose() + lb * lb.transpose() + lambda_inv;
      grad_d = e * gsym;
    }
    const bool needs = t.requires_grad(a) || t.requires_grad(gm);
    std::vector<std::size_t> ids = {a.id(), gm.id()};
    if (quadratic_) {
      // D enters through its symmetrization; the gradient w.r.t. the raw matrix is the symmetric part.
      Var d = bind(params[2]);
      ids.push_back(d.id());
    }
    const bool any = needs || (quadratic_ && t.requires_grad(ids[2]));
    return t.record("exp_quadratic_gaussian_expectation", Matrix::Constant(1, 1, e), any,
                    [ids, grad_a, grad_d, e](Tape& tp, const Matrix& g) {
                      const double s = g(0, 0);
                      tp.accumulate(ids[0], s * grad_a);
                      tp.accumulate(ids[1], Matrix::Constant(1, 1, s * e));
                      if (ids.size() > 2) tp.accumulate(ids[2], s * grad_d);
                    });
  }

  Index dim_ = 0;
  bool quadratic_ = true;
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------

using AnyMap = std::variant<ResidualMap, AffineMap, ConvexPotential>;
using AnyDual = std::variant<DualPotential, ExpQuadraticDual>;

inline Var apply(AnyMap& m, Tape& t, Var x) {
  return std::visit([&](auto& map) { return map.apply(t, x); }, m);
}
inline Var apply(const AnyMap& m, Tape& t, Var x) {
  return std::visit([&](const auto& map) { return map.apply(t, x); }, m);
}
inline Matrix apply(const AnyMap& m, const Matrix& x) {
  return std::visit([&](const auto& map) { return map(x); }, m);
}
inline std::vector<Parameter*> parameters(AnyMap& m) {
  return std::visit([](auto& map) { return map.parameters(); }, m);
}
inline Index dim(const AnyMap& m) {
  return std::visit([](const auto& map) { return map.dim(); }, m);
}
inline void project_constraints(AnyMap& m) {
  if (auto* p = std::get_if<ConvexPotential>(&m)) p->project_nonneg();
}
inline json to_json(const AnyMap& m) {
  return std::visit([](const auto& map) { return map.to_json(); }, m);
}
inline AnyMap map_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "residual") return ResidualMap::from_json(j);
  if (type == "affine") return AffineMap::from_json(j);
  if (type == "icnn") return ConvexPotential::from_json(j);
  throw InvalidArgument("unknown map type '" + type + "'");
}

inline Var apply(AnyDual& d, Tape& t, Var z) {
  return std::visit([&](auto& dual) { return dual.apply(t, z); }, d);
}
inline Var log_apply(AnyDual& d, Tape& t, Var z) {
  return std::visit([&](auto& dual) { return dual.log_apply(t, z); }, d);
}
inline Matrix apply(const AnyDual& d, const Matrix& z) {
  return std::visit([&](const auto& dual) { return dual(z); }, d);
}
inline std::vector<Parameter*> parameters(AnyDual& d) {
  return std::visit([](auto& dual) { return dual.parameters(); }, d);
}
inline json to_json(const AnyDual& d) {
  return std::visit([](const auto& dual) { return dual.to_json(); }, d);
}
inline AnyDual dual_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "mlp_dual") return DualPotential::from_json(j);
  if (type == "exp_quadratic_dual") return ExpQuadraticDual::from_json(j);
  throw InvalidArgument("unknown dual type '" + type + "'");
}

}  // namespace wgflow::models
