#pragma once

// 1D finite-difference JKO reference for the generalized entropy
// G(P) = 1/(m-1) * integral P^m (porous medium flow).
//
// Unknowns are cell masses gamma_ij = dx^2 pi_ij moved from cell j to cell i,
// with column sums fixed to the current cell masses dx * P_k(j). One step solves
//
//   min  1/(2a) sum_ij gamma_ij (x_i - x_j)^2 + dx/(m-1) sum_i (r_i/dx)^m,  r = gamma 1
//
// by exact block-coordinate minimization over columns: each column subproblem
// is a separable convex program on a simplex, solved by safeguarded Newton on
// its multiplier. The objective decreases monotonically; the exit test is the
// Frank-Wolfe duality gap, which bounds the suboptimality.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wgflow/error.hpp"
#include "wgflow/random.hpp"

namespace wgflow::gridref {

struct Grid1D {
  double lower = 0.0;
  double dx = 1.0;
  Vector density;  // P_hat at cell centers

  Index size() const { return density.size(); }
  double node(Index i) const { return lower + (static_cast<double>(i) + 0.5) * dx; }
  Vector nodes() const {
    Vector x(size());
    for (Index i = 0; i < size(); ++i) x(i) = node(i);
    return x;
  }
  double mass() const { return dx * density.sum(); }

  /// d cells on [lo, hi] with the density sampled at cell centers and renormalized to unit mass.
  static Grid1D from_function(double lo, double hi, Index d, const std::function<double(double)>& f) {
    if (!(hi > lo)) throw InvalidArgument("grid: domain must satisfy lo < hi");
    if (d < 1) throw InvalidArgument("grid: need at least one cell");
    Grid1D g;
    g.lower = lo;
    g.dx = (hi - lo) / static_cast<double>(d);
    g.density.resize(d);
    for (Index i = 0; i < d; ++i) g.density(i) = std::max(0.0, f(g.node(i)));
    const double m = g.mass();
    if (!(m > 0.0)) throw InvalidArgument("grid: initial density has zero mass");
    g.density /= m;
    return g;
  }
};

inline void validate(const Grid1D& g) {
  if (!(g.dx > 0.0)) throw InvalidArgument("grid: spacing must be positive");
  if ((g.density.array() < 0.0).any()) throw InvalidArgument("grid: density must be nonnegative");
  if (std::abs(g.mass() - 1.0) > 1e-9) {
    throw InvalidArgument("grid: density must have unit mass (got " + std::to_string(g.mass()) + ")");
  }
}

inline double l1_grid_distance(const Grid1D& a, const Grid1D& b) {
  if (a.size() != b.size() || std::abs(a.dx - b.dx) > 1e-12 * a.dx || std::abs(a.lower - b.lower) > 1e-12) {
    throw InvalidArgument("l1_grid_distance: grids differ");
  }
  return a.dx * (a.density - b.density).cwiseAbs().sum();
}

/// dx/(m-1) sum P^m
inline double generalized_entropy(const Grid1D& g, double m) {
  return g.dx / (m - 1.0) * g.density.array().pow(m).sum();
}

struct StepOptions {
  double tol = 1e-10;   // Frank-Wolfe gap at exit
  int max_sweeps = 200000;
};

struct StepReport {
  int sweeps = 0;
  double gap = 0.0;
  double objective = 0.0;
  std::vector<double> objective_trace;  // one entry per sweep
};

namespace detail {

class ColumnSolver {
 public:
  ColumnSolver(const Grid1D& grid, double a, double m) : grid_(grid), a_(a), m_(m) {}

  double cost(Index i, Index j) const {
    const double d = static_cast<double>(i - j) * grid_.dx;
    return d * d / (2.0 * a_);
  }
  // Marginal entropy cost at density u: m/(m-1) u^(m-1).
  double g(double u) const {
    if (u <= 0.0) return 0.0;
    return m_ == 2.0 ? 2.0 * u : m_ / (m_ - 1.0) * std::pow(u, m_ - 1.0);
  }
  double ginv(double v) const {
    if (v <= 0.0) return 0.0;
    return m_ == 2.0 ? 0.5 * v : std::pow((m_ - 1.0) * v / m_, 1.0 / (m_ - 1.0));
  }
  double ginv_derivative(double v) const {
    if (v <= 0.0) return 0.0;
    return m_ == 2.0 ? 0.5 : ginv(v) / ((m_ - 1.0) * v);
  }

  /// Cells i with cost(i, j) < bound.
  std::pair<Index, Index> window(Index j, double bound) const {
    const Index d = grid_.size();
    if (!(bound > 0.0)) return {j, j};
    const double reach = std::sqrt(2.0 * a_ * bound) / grid_.dx;
    const auto w = static_cast<Index>(std::min(std::ceil(reach), static_cast<double>(d)));
    return {std::max<Index>(0, j - w), std::min<Index>(d - 1, j + w)};
  }

  /// Re-solves column j in place; rest is the mass the other columns put in each cell.
  /// Returns the filled index range of col (entries outside are zero).
  std::pair<Index, Index> solve(Index j, double pj, const Vector& rest, Vector& col) const {
    const double dx = grid_.dx;
    double hi = g((rest(j) + pj) / dx);  // all mass into cell j already suffices
    const auto [i0, i1] = window(j, hi);
    double lo = std::numeric_limits<double>::infinity();
    for (Index i = i0; i <= i1; ++i) lo = std::min(lo, cost(i, j) + g(rest(i) / dx));
    auto total = [&](double lam, double* slope) {
      double s = 0.0, ds = 0.0;
      for (Index i = i0; i <= i1; ++i) {
        const double v = lam - cost(i, j);
        if (v <= 0.0) continue;
        const double gi = dx * ginv(v) - rest(i);
        if (gi > 0.0) {
          s += gi;
          ds += dx * ginv_derivative(v);
        }
      }
      if (slope) *slope = ds;
      return s;
    };
    // Safeguarded Newton on the increasing convex function total(lam) - pj.
    double lam = hi;
    for (int it = 0; it < 200; ++it) {
      double slope;
      const double f = total(lam, &slope) - pj;
      if (std::abs(f) <= 1e-15 * pj) break;
      if (f > 0.0) hi = lam;
      else lo = lam;
      double next = slope > 0.0 ? lam - f / slope : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (hi - lo <= 1e-16 * std::max(1.0, std::abs(hi))) break;
      lam = next;
    }
    double s = 0.0;
    for (Index i = i0; i <= i1; ++i) {
      const double v = lam - cost(i, j);
      col(i) = v > 0.0 ? std::max(0.0, dx * ginv(v) - rest(i)) : 0.0;
      s += col(i);
    }
    // Exact column mass: the root-finding residual is absorbed proportionally.
    if (s > 0.0) {
      for (Index i = i0; i <= i1; ++i) col(i) *= pj / s;
    } else {
      col(j) = pj;
    }
    return {i0, i1};
  }

 private:
  const Grid1D& grid_;
  double a_, m_;
};

}  // namespace detail

/// One JKO step; returns P_hat_{k+1} on the same grid.
inline Grid1D grid_jko_step(const Grid1D& current, double a, double m, const StepOptions& opt = {},
                            StepReport* report = nullptr) {
  validate(current);
  if (!(a > 0.0)) throw InvalidArgument("grid_jko_step: a must be positive");
  if (!(m > 1.0)) throw InvalidArgument("grid_jko_step: m must exceed 1");
  const Index d = current.size();
  const double dx = current.dx;
  Grid1D next = current;
  StepReport rep;
  if (d == 1) {
    if (report) *report = rep;
    return next;
  }
  const Vector p = dx * current.density;
  Matrix gamma = Matrix::Zero(d, d);
  gamma.diagonal() = p;
  std::vector<std::pair<Index, Index>> support(static_cast<std::size_t>(d));
  for (Index j = 0; j < d; ++j) support[static_cast<std::size_t>(j)] = {j, j};
  Vector r = p;
  detail::ColumnSolver solver(current, a, m);

  auto objective = [&]() {
    double f = 0.0;
    for (Index j = 0; j < d; ++j) {
      const auto [i0, i1] = support[static_cast<std::size_t>(j)];
      for (Index i = i0; i <= i1; ++i) f += gamma(i, j) * solver.cost(i, j);
    }
    for (Index i = 0; i < d; ++i) f += dx / (m - 1.0) * std::pow(r(i) / dx, m);
    return f;
  };
  // Frank-Wolfe gap: sum_ij gamma_ij (G_ij - min_i G_ij), G_ij = cost_ij + g(r_i / dx).
  auto fw_gap = [&]() {
    Vector gr(d);
    for (Index i = 0; i < d; ++i) gr(i) = solver.g(r(i) / dx);
    double gap = 0.0;
    for (Index j = 0; j < d; ++j) {
      if (p(j) <= 0.0) continue;
      double best = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < d; ++i) best = std::min(best, solver.cost(i, j) + gr(i));
      const auto [i0, i1] = support[static_cast<std::size_t>(j)];
      for (Index i = i0; i <= i1; ++i)
        if (gamma(i, j) > 0.0) gap += gamma(i, j) * (solver.cost(i, j) + gr(i) - best);
    }
    return gap;
  };

  Vector col = Vector::Zero(d);
  double prev = objective();
  rep.gap = fw_gap();
  int stall = 0;
  while (rep.gap > opt.tol) {
    if (rep.sweeps >= opt.max_sweeps) {
      throw ConvergenceError("grid_jko_step: KKT residual " + std::to_string(rep.gap) + " above tolerance " +
                             std::to_string(opt.tol) + " after " + std::to_string(rep.sweeps) + " sweeps");
    }
    // Symmetric Gauss-Seidel sweep.
    for (int pass = 0; pass < 2; ++pass) {
      for (Index k = 0; k < d; ++k) {
        const Index j = pass == 0 ? k : d - 1 - k;
        if (p(j) <= 0.0) continue;
        auto& sup = support[static_cast<std::size_t>(j)];
        for (Index i = sup.first; i <= sup.second; ++i) {
          r(i) -= gamma(i, j);
          gamma(i, j) = 0.0;
        }
        const auto range = solver.solve(j, p(j), r, col);
        for (Index i = range.first; i <= range.second; ++i) {
          gamma(i, j) = col(i);
          r(i) += col(i);
          col(i) = 0.0;
        }
        sup = range;
      }
    }
    ++rep.sweeps;
    const double f = objective();
    rep.objective_trace.push_back(f);
    rep.gap = fw_gap();
    if (prev - f < 1e-16 * std::max(1.0, std::abs(f))) {
      if (++stall > 50 && rep.gap > opt.tol) {
        throw ConvergenceError("grid_jko_step: solver stalled with KKT residual " + std::to_string(rep.gap));
      }
    } else {
      stall = 0;
    }
    prev = f;
  }
  rep.objective = objective();
  next.density = r.cwiseMax(0.0) / dx;
  next.density *= 1.0 / next.mass();  // remove rounding drift
  if (report) *report = rep;
  return next;
}

struct RunResult {
  std::vector<Grid1D> densities;  // P_hat_0 .. P_hat_K
  std::vector<double> entropy;
  std::vector<StepReport> reports;
};

inline RunResult grid_run(const Grid1D& initial, double a, double m, int steps, const StepOptions& opt = {}) {
  if (steps < 0) throw InvalidArgument("grid_run: steps must be >= 0");
  RunResult out;
  out.densities.push_back(initial);
  out.entropy.push_back(generalized_entropy(initial, m));
  for (int k = 0; k < steps; ++k) {
    StepReport rep;
    out.densities.push_back(grid_jko_step(out.densities.back(), a, m, opt, &rep));
    out.entropy.push_back(generalized_entropy(out.densities.back(), m));
    out.reports.push_back(std::move(rep));
  }
  return out;
}

}  // namespace wgflow::gridref
