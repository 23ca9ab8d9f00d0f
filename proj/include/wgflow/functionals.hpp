#pragma once

// Variational f-divergence objectives, reference measures and restricted
// (function-class) divergence estimates.

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <variant>

#include "wgflow/autodiff.hpp"
#include "wgflow/error.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/models.hpp"
#include "wgflow/random.hpp"
#include "wgflow/targets.hpp"

namespace wgflow::functionals {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// f / f* pairs

enum class FDivKind { KL, GeneralizedEntropy, JSD, Pearson };

struct FDivergenceSpec {
  FDivKind kind = FDivKind::KL;
  double m = 2.0;  // exponent of the generalized entropy

  static FDivergenceSpec kl() { return {FDivKind::KL, 2.0}; }
  static FDivergenceSpec entropy(double m) {
    if (!(m > 1.0)) throw InvalidArgument("generalized entropy: m must exceed 1");
    return {FDivKind::GeneralizedEntropy, m};
  }
  static FDivergenceSpec jsd() { return {FDivKind::JSD, 2.0}; }
  static FDivergenceSpec pearson() { return {FDivKind::Pearson, 2.0}; }

  std::string name() const {
    switch (kind) {
      case FDivKind::KL: return "kl";
      case FDivKind::GeneralizedEntropy: return "entropy";
      case FDivKind::JSD: return "jsd";
      case FDivKind::Pearson: return "pearson";
    }
    return "?";
  }

  /// f on (0, inf).
  double f(double x) const {
    if (!(x >= 0.0)) throw InvalidArgument(name() + ": f is defined on x >= 0");
    switch (kind) {
      case FDivKind::KL: return x > 0.0 ? x * std::log(x) : 0.0;
      case FDivKind::GeneralizedEntropy: return (std::pow(x, m) - x) / (m - 1.0);
      case FDivKind::JSD:
        return (x > 0.0 ? x * std::log(x) : 0.0) - (x + 1.0) * std::log((x + 1.0) / 2.0);
      case FDivKind::Pearson: return (x - 1.0) * (x - 1.0);
    }
    return 0.0;
  }

  double fprime(double x) const {
    switch (kind) {
      case FDivKind::KL: return std::log(x) + 1.0;
      case FDivKind::GeneralizedEntropy: return (m * std::pow(x, m - 1.0) - 1.0) / (m - 1.0);
      case FDivKind::JSD: return std::log(2.0 * x / (x + 1.0));
      case FDivKind::Pearson: return 2.0 * (x - 1.0);
    }
    return 0.0;
  }

  /// Whether f*(y) is finite.
  bool in_domain(double y) const { return kind != FDivKind::JSD || y < std::numbers::ln2; }

  /// Convex conjugate sup_{x >= 0} x y - f(x).
  double fstar(double y) const {
    switch (kind) {
      case FDivKind::KL: return std::exp(y - 1.0);
      case FDivKind::GeneralizedEntropy: {
        const double base = ((m - 1.0) * y + 1.0) / m;
        return base > 0.0 ? std::pow(base, m / (m - 1.0)) : 0.0;
      }
      case FDivKind::JSD:
        if (!in_domain(y)) throw InvalidArgument("jsd: f*(y) requires y < log 2");
        return -std::log(2.0 - std::exp(y));
      case FDivKind::Pearson: {
        // The supremum over x >= 0 clips at x = 0 for y < -2.
        return y >= -2.0 ? y + 0.25 * y * y : -1.0;
      }
    }
    return 0.0;
  }

  double fstar_derivative(double y) const {
    switch (kind) {
      case FDivKind::KL: return std::exp(y - 1.0);
      case FDivKind::GeneralizedEntropy: {
        const double base = ((m - 1.0) * y + 1.0) / m;
        return base > 0.0 ? std::pow(base, 1.0 / (m - 1.0)) : 0.0;
      }
      case FDivKind::JSD: return std::exp(y) / (2.0 - std::exp(y));
      case FDivKind::Pearson: return y >= -2.0 ? 1.0 + 0.5 * y : 0.0;
    }
    return 0.0;
  }

  /// Elementwise f*(y) as a tape node.
  Var fstar(Var y) const {
    if (kind == FDivKind::JSD && (y.value().array() >= std::numbers::ln2).any()) {
      throw Error("jsd: dual value outside the domain y < log 2");
    }
    const FDivergenceSpec self = *this;
    return ad::detail::unary(
        "fstar", y, [self](double v) { return self.fstar(v); }, [self](double v) { return self.fstar_derivative(v); });
  }
};

// ---------------------------------------------------------------------------
// Reference measures

struct UniformBox {
  RowVector lower;
  RowVector upper;

  double volume() const { return (upper - lower).prod(); }
  Matrix sample(Rng& rng, Index count) const { return uniform(rng, count, lower, upper); }
};

struct EmpiricalDataset {
  Matrix samples;
};

using ReferenceMeasure = std::variant<Gaussian, UniformBox, EmpiricalDataset>;

inline Matrix sample_reference(const ReferenceMeasure& ref, Rng& rng, Index count) {
  if (const auto* g = std::get_if<Gaussian>(&ref)) return g->sample(rng, count);
  if (const auto* b = std::get_if<UniformBox>(&ref)) return b->sample(rng, count);
  const auto& d = std::get<EmpiricalDataset>(ref);
  return gather_rows(d.samples, sample_indices(rng, d.samples.rows(), count));
}

inline constexpr double reference_covariance_regularizer = 1e-6;

/// Empirical mean and covariance plus 1e-6 I.
inline Gaussian fit_reference_gaussian(const Matrix& particles) {
  const Index n = particles.cols();
  if (particles.rows() < n + 1) {
    throw InvalidArgument("fit_reference_gaussian: need at least " + std::to_string(n + 1) + " particles, got " +
                          std::to_string(particles.rows()));
  }
  Gaussian g = empirical_gaussian(particles);
  g.cov += reference_covariance_regularizer * Matrix::Identity(n, n);
  return g;
}

inline constexpr double bounding_box_floor = 1e-3;

/// Axis-aligned box expanded by margin * range per axis (at least 1e-3).
inline UniformBox bounding_box(const Matrix& particles, double margin = 0.2) {
  if (!(margin >= 0.0)) throw InvalidArgument("bounding_box: margin must be >= 0");
  if (particles.rows() < 1) throw InvalidArgument("bounding_box: no particles");
  UniformBox b;
  b.lower = particles.colwise().minCoeff();
  b.upper = particles.colwise().maxCoeff();
  for (Index j = 0; j < b.lower.size(); ++j) {
    const double pad = std::max(margin * (b.upper(j) - b.lower(j)), bounding_box_floor);
    b.lower(j) -= pad;
    b.upper(j) += pad;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Tape helpers for closed-form log-densities

inline Var target_log_density(Var x, const targets::TargetDensity& q) {
  Vector l;
  Matrix s;
  q.evaluate(x.value(), l, s);
  return ad::field(x, Matrix(l), std::move(s), "target_log_density");
}

inline Var gaussian_log_density(Var x, const Gaussian& g) {
  return ad::field(x, Matrix(g.log_density(x.value())), g.score(x.value()), "gaussian_log_density");
}

// ---------------------------------------------------------------------------
// Variational objective values on fixed batches. `map` and `dual` are any callables
// Matrix -> Matrix (dual outputs one column).

template <class Map, class Dual>
double kl_variational_value(const targets::TargetDensity& target, const Gaussian& mu, const Dual& h, const Map& T,
                            const Matrix& x, const Matrix& z) {
  const Matrix tx = T(x);
  const Matrix htx = h(tx);
  if ((htx.array() <= 0.0).any()) throw Error("kl objective: dual potential h(T(x)) must be positive");
  const double a = (htx.array().log().matrix().col(0) + mu.log_density(tx) - target.log_density(tx)).mean();
  return a - h(z).mean();
}

template <class Map, class Dual>
double entropy_variational_value(double m, double omega, const Dual& h, const Map& T, const Matrix& x,
                                 const Matrix& z) {
  if (!(m > 1.0)) throw InvalidArgument("entropy objective: m must exceed 1");
  if (!(omega > 0.0)) throw InvalidArgument("entropy objective: volume must be positive");
  const Matrix htx = h(T(x));
  const Matrix hz = h(z);
  if ((htx.array() < 0.0).any() || (hz.array() < 0.0).any()) throw Error("entropy objective: h must be >= 0");
  const double scale = std::pow(omega, -(m - 1.0));
  return scale * ((m / (m - 1.0)) * htx.array().pow(m - 1.0).mean() - hz.array().pow(m).mean());
}

template <class Map, class Dual>
double jsd_variational_value(const Dual& h, const Map& T, const Matrix& x, const Matrix& y) {
  const Matrix htx = h(T(x));
  const Matrix hy = h(y);
  auto inside = [](const Matrix& v) { return (v.array() > 0.0).all() && (v.array() < 1.0).all(); };
  if (!inside(htx) || !inside(hy)) throw Error("jsd objective: discriminator output must lie in (0, 1)");
  return std::log(4.0) + (1.0 - htx.array()).log().mean() + hy.array().log().mean();
}

/// Generic dual form E_P[g] - E_Q[f*(g)] from dual values on each batch.
inline double fdiv_dual_value(const FDivergenceSpec& f, const Vector& g_on_p, const Vector& g_on_q) {
  double tail = 0.0;
  for (Index i = 0; i < g_on_q.size(); ++i) tail += f.fstar(g_on_q(i));
  return g_on_p.mean() - tail / static_cast<double>(g_on_q.size());
}

// ---------------------------------------------------------------------------
// Closed-form Gaussian KL

inline double exact_gaussian_kl(const Vector& m1, const Matrix& s1, const Vector& m2, const Matrix& s2) {
  if (m1.size() != m2.size() || s1.rows() != m1.size() || s2.rows() != m2.size()) {
    throw InvalidArgument("exact_gaussian_kl: dimension mismatch");
  }
  const auto l1 = spd_cholesky(s1, "first covariance");
  const auto l2 = spd_cholesky(s2, "second covariance");
  const Index n = m1.size();
  const Vector d = m1 - m2;
  const double quad = d.dot(l2.solve(d));
  const double tr = l2.solve(s1).trace();
  return 0.5 * (log_det_spd(l2) - log_det_spd(l1) - static_cast<double>(n) + quad + tr);
}

inline double exact_gaussian_kl(const Gaussian& p, const Gaussian& q) {
  return exact_gaussian_kl(p.mean, p.cov, q.mean, q.cov);
}

// ---------------------------------------------------------------------------
// Restricted divergence D_f^H(P || Q) = sup_{g in H} E_P[g] - E_Q[f*(g)]

enum class FunctionClass { Affine, Quadratic, Network };

inline std::string to_string(FunctionClass c) {
  switch (c) {
    case FunctionClass::Affine: return "affine";
    case FunctionClass::Quadratic: return "quadratic";
    case FunctionClass::Network: return "network";
  }
  return "?";
}

inline FunctionClass function_class_from_string(const std::string& s) {
  if (s == "affine") return FunctionClass::Affine;
  if (s == "quadratic") return FunctionClass::Quadratic;
  if (s == "network") return FunctionClass::Network;
  throw InvalidArgument("unknown function class '" + s + "'");
}

struct RestrictedOptions {
  int iterations = 3000;
  double lr = 0.02;
  std::uint64_t seed = 0;
  std::vector<Index> hidden = {16, 16};
};

/// Q given by samples, or (KL only, affine/quadratic classes) a Gaussian with exact expectations.
using QSource = std::variant<Matrix, Gaussian>;

struct RestrictedResult {
  double value = 0.0;  // objective on the given samples at the returned parameters
  FunctionClass cls = FunctionClass::Affine;
  nlohmann::json params;
  /// Population objective of the returned g when P is Gaussian (KL, affine/quadratic only).
  std::optional<double> population_value;
  int iterations = 0;
};

namespace detail {

// E_{x ~ N(m, S)}[x^T D x + a^T x + c]
inline double gaussian_quadratic_mean(const models::ExpQuadraticDual& g, const Gaussian& p) {
  const Matrix d = g.quadratic_form();
  return (d * p.cov).trace() + p.mean.dot(d * p.mean) + g.alpha().dot(p.mean.transpose()) + g.gamma();
}

}  // namespace detail

inline RestrictedResult restricted_divergence(const FDivergenceSpec& f, const Matrix& p_samples, const QSource& q,
                                              FunctionClass cls, const RestrictedOptions& opt = {},
                                              const std::optional<Gaussian>& p_population = std::nullopt) {
  const Index n = p_samples.cols();
  if (p_samples.rows() < 1) throw InvalidArgument("restricted_divergence: empty P sample");
  const auto* q_gauss = std::get_if<Gaussian>(&q);
  if (q_gauss) {
    if (f.kind != FDivKind::KL || cls == FunctionClass::Network) {
      throw InvalidArgument("restricted_divergence: exact Q expectations need the KL divergence and an affine or "
                            "quadratic class");
    }
    if (q_gauss->dim() != n) throw InvalidArgument("restricted_divergence: Q dimension mismatch");
  } else if (std::get<Matrix>(q).cols() != n) {
    throw InvalidArgument("restricted_divergence: Q dimension mismatch");
  }
  if (opt.iterations < 1) throw InvalidArgument("restricted_divergence: optimizer budget must be >= 1");

  models::AnyDual g;
  if (cls == FunctionClass::Network) {
    Rng rng(opt.seed);
    models::DualPotential::Config c;
    c.dim = n;
    c.hidden = opt.hidden;
    c.transform = models::OutputTransform::Identity;
    g = models::DualPotential(c, rng);
  } else {
    g = models::ExpQuadraticDual(n, cls == FunctionClass::Quadratic);
  }

  auto objective = [&](Tape& t) -> Var {
    Var xp = t.constant(p_samples);
    Var gp = std::visit(
        [&](auto& d) -> Var {
          if constexpr (std::is_same_v<std::decay_t<decltype(d)>, models::ExpQuadraticDual>) return d.log_apply(t, xp);
          else return d.apply(t, xp);
        },
        g);
    Var tail;
    if (q_gauss) {
      // E_Q[exp(g - 1)]
      tail = ad::scale(std::get<models::ExpQuadraticDual>(g).gaussian_expectation(t, *q_gauss), std::exp(-1.0));
    } else {
      Var xq = t.constant(std::get<Matrix>(q));
      Var gq = std::visit(
          [&](auto& d) -> Var {
            if constexpr (std::is_same_v<std::decay_t<decltype(d)>, models::ExpQuadraticDual>)
              return d.log_apply(t, xq);
            else return d.apply(t, xq);
          },
          g);
      tail = ad::mean(f.fstar(gq));
    }
    return ad::sub(ad::mean(gp), tail);
  };

  auto params = models::parameters(g);
  ad::Adam adam(params, {opt.lr, 0.9, 0.999, 1e-8});
  for (int it = 0; it < opt.iterations; ++it) {
    // Linear decay to 10% of the initial rate sharpens the final iterate.
    adam.state().config.lr = opt.lr * (1.0 - 0.9 * static_cast<double>(it) / opt.iterations);
    Tape t;
    Var obj;
    try {
      obj = objective(t);
    } catch (const Error& e) {
      throw ConvergenceError("restricted_divergence: optimizer diverged at iteration " + std::to_string(it) + " (" +
                             e.what() + ")");
    }
    if (!std::isfinite(obj.scalar())) {
      throw ConvergenceError("restricted_divergence: loss is NaN at iteration " + std::to_string(it));
    }
    adam.zero_grad();
    t.backward(ad::neg(obj));
    adam.step();
  }

  RestrictedResult r;
  r.cls = cls;
  r.iterations = opt.iterations;
  {
    Tape t;
    r.value = objective(t).scalar();
  }
  r.params = models::to_json(g);
  if (p_population && cls != FunctionClass::Network && f.kind == FDivKind::KL) {
    const auto& eq = std::get<models::ExpQuadraticDual>(g);
    double tail;
    if (q_gauss) {
      Tape t;
      tail = eq.gaussian_expectation(t, *q_gauss).scalar() * std::exp(-1.0);
      r.population_value = detail::gaussian_quadratic_mean(eq, *p_population) - tail;
    }
  }
  return r;
}

}  // namespace wgflow::functionals
