#pragma once

// Exact log-densities of flows made of strictly convex potential gradients:
// invert each map by maximizing <x, y> - phi(x), then apply the change of
// variables  log P_k(y) = log P_0(x_0) - sum_i log det Hess phi_i(x_{i-1}).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wgflow/error.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/models.hpp"
#include "wgflow/random.hpp"

namespace wgflow::density {

using models::ConvexPotential;

inline constexpr Index max_density_dim = 8;

inline double log_det_hessian(const ConvexPotential& phi, const Vector& x) {
  const Matrix h = models::potential_hessian(phi, x);
  Eigen::LLT<Matrix> llt(h);
  if (llt.info() != Eigen::Success) throw Error("log_det_hessian: Hessian is not positive definite");
  return log_det_spd(llt);
}

struct InversionOptions {
  double tol = 1e-8;
  int max_iter = 100;
};

/// Solves grad phi(x) = y by damped Newton on the convex merit phi(x) - <x, y>, starting at x = y.
inline Vector invert_map(const ConvexPotential& phi, const Vector& y, const InversionOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw InvalidArgument("invert_map: tol must be positive");
  if (phi.dim() > max_density_dim) {
    throw InvalidArgument("invert_map: dimension " + std::to_string(phi.dim()) + " exceeds " +
                          std::to_string(max_density_dim));
  }
  auto merit = [&](const Vector& x) { return phi.potential(Matrix(x.transpose()))(0) - x.dot(y); };
  auto residual = [&](const Vector& x) -> Vector { return phi(Matrix(x.transpose())).row(0).transpose() - y; };
  Vector x = y;
  Vector r = residual(x);
  double f = merit(x);
  for (int it = 0; it < opt.max_iter; ++it) {
    if (r.norm() <= opt.tol) return x;
    const Matrix h = models::potential_hessian(phi, x);
    Eigen::LLT<Matrix> llt(h);
    Vector dir = llt.info() == Eigen::Success ? Vector(-llt.solve(r)) : Vector(-r);
    if (dir.dot(r) >= 0.0) dir = -r;
    // Backtracking (Armijo) on the strongly convex merit; near the solution the merit is flat to
    // rounding, so a step that shrinks the residual without raising the merit is accepted too.
    double step = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vector cand = x + step * dir;
      const double fc = merit(cand);
      const Vector rc = residual(cand);
      const bool flat = fc <= f + 1e-12 * (1.0 + std::abs(f)) && rc.norm() < r.norm();
      if (fc <= f + 1e-4 * step * r.dot(dir) || flat) {
        x = cand;
        f = fc;
        r = rc;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  if (r.norm() <= opt.tol) return x;
  throw ConvergenceError("invert_map: residual " + std::to_string(r.norm()) + " above tolerance after " +
                         std::to_string(opt.max_iter) + " iterations");
}

/// Base density with a closed-form log-density, followed by convex-potential maps.
struct InvertibleChain {
  std::function<double(const Vector&)> base_log_density;
  std::vector<ConvexPotential> maps;
  Index dim = 0;
};

inline InvertibleChain gaussian_chain(const Gaussian& base, std::vector<ConvexPotential> maps) {
  InvertibleChain c;
  c.dim = base.dim();
  c.base_log_density = [base](const Vector& x) { return base.log_density(Matrix(x.transpose()))(0); };
  c.maps = std::move(maps);
  return c;
}

inline double log_density(const InvertibleChain& chain, const Vector& y, const InversionOptions& opt = {}) {
  if (y.size() != chain.dim) throw InvalidArgument("log_density: point dimension mismatch");
  if (chain.dim > max_density_dim) throw InvalidArgument("log_density: dimension exceeds " + std::to_string(max_density_dim));
  Vector x = y;
  double correction = 0.0;
  for (std::size_t i = chain.maps.size(); i-- > 0;) {
    const ConvexPotential& phi = chain.maps[i];
    x = invert_map(phi, x, opt);
    correction += log_det_hessian(phi, x);
  }
  return chain.base_log_density(x) - correction;
}

inline Vector log_density(const InvertibleChain& chain, const Matrix& points, const InversionOptions& opt = {}) {
  Vector out(points.rows());
  for (Index i = 0; i < points.rows(); ++i) out(i) = log_density(chain, Vector(points.row(i).transpose()), opt);
  return out;
}

}  // namespace wgflow::density
