#pragma once

// Evaluation metrics: symmetric KL, kernelized Stein discrepancy, moment gaps
// and 1D density estimates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "wgflow/error.hpp"
#include "wgflow/functionals.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/random.hpp"

namespace wgflow::metrics {

struct Estimate {
  double value = 0.0;
  double stderr_ = 0.0;
};

/// D(P||Q) + D(Q||P) between Gaussians.
inline double symkl(const Gaussian& p, const Gaussian& q) {
  return functionals::exact_gaussian_kl(p, q) + functionals::exact_gaussian_kl(q, p);
}

/// A normalized log-density with a sampler, for Monte Carlo SymKL.
struct SampledDensity {
  std::function<Vector(const Matrix&)> log_density;
  std::function<Matrix(Rng&, Index)> sample;
};

inline Estimate symkl_mc(const SampledDensity& p, const SampledDensity& q, Index count, Rng& rng) {
  if (count < 2) throw InvalidArgument("symkl_mc: need at least 2 samples");
  const Matrix xp = p.sample(rng, count);
  const Matrix xq = q.sample(rng, count);
  const Vector dp = p.log_density(xp) - q.log_density(xp);
  const Vector dq = q.log_density(xq) - p.log_density(xq);
  auto var = [](const Vector& v) { return (v.array() - v.mean()).square().sum() / static_cast<double>(v.size() - 1); };
  Estimate e;
  e.value = dp.mean() + dq.mean();
  e.stderr_ = std::sqrt(var(dp) / static_cast<double>(count) + var(dq) / static_cast<double>(count));
  return e;
}

// ---------------------------------------------------------------------------
// Kernelized Stein discrepancy with k(x, y) = exp(-|x - y|^2 / (2 h^2)).

/// Median of pairwise distances (over at most `cap` points, deterministic prefix).
inline double median_bandwidth(const Matrix& x, Index cap = 2000) {
  const Index n = std::min(x.rows(), cap);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d.push_back((x.row(i) - x.row(j)).norm());
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 ? *mid : 1.0;
}

struct KernelSpec {
  double bandwidth = 0.0;  // <= 0 selects the median heuristic
};

/// Stein kernel u_Q(x, x').
inline double stein_kernel(const RowVector& x, const RowVector& y, const RowVector& sx, const RowVector& sy,
                           double h) {
  const RowVector diff = x - y;
  const double r2 = diff.squaredNorm();
  const double h2 = h * h;
  const double k = std::exp(-r2 / (2.0 * h2));
  const double n = static_cast<double>(x.size());
  // grad_x k = -diff/h2 k, grad_y k = diff/h2 k, tr(grad_x grad_y k) = (n/h2 - r2/h2^2) k
  return k * (sx.dot(sy) + sx.dot(diff) / h2 - diff.dot(sy) / h2 + n / h2 - r2 / (h2 * h2));
}

/// U-statistic over i != j.
inline double ksd(const Matrix& x, const Matrix& score, KernelSpec kernel = {}) {
  const Index N = x.rows();
  const Index n = x.cols();
  if (N < 2) throw InvalidArgument("ksd: need at least 2 samples");
  if (score.rows() != N || score.cols() != n) throw InvalidArgument("ksd: score shape mismatch");
  const double h = kernel.bandwidth > 0.0 ? kernel.bandwidth : median_bandwidth(x);
  const double h2 = h * h;
  // Row-major copies keep the O(N^2) loop cache friendly.
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xr = x, sr = score;
  double total = 0.0;
  for (Index i = 0; i < N; ++i) {
    const double* xi = xr.data() + i * n;
    const double* si = sr.data() + i * n;
    for (Index j = i + 1; j < N; ++j) {
      const double* xj = xr.data() + j * n;
      const double* sj = sr.data() + j * n;
      double r2 = 0.0, ss = 0.0, sxd = 0.0, dsy = 0.0;
      for (Index c = 0; c < n; ++c) {
        const double d = xi[c] - xj[c];
        r2 += d * d;
        ss += si[c] * sj[c];
        sxd += si[c] * d;
        dsy += d * sj[c];
      }
      const double k = std::exp(-r2 / (2.0 * h2));
      total += k * (ss + sxd / h2 - dsy / h2 + static_cast<double>(n) / h2 - r2 / (h2 * h2));
    }
  }
  return 2.0 * total / (static_cast<double>(N) * static_cast<double>(N - 1));
}

// ---------------------------------------------------------------------------

/// |Sigma_Q^{-1/2} (mean_P - mean_Q)|, the sup over unit-Q-norm centered linear h.
inline double moment_gap(const Matrix& p, const Matrix& q) {
  if (p.cols() != q.cols()) throw InvalidArgument("moment_gap: dimension mismatch");
  const Gaussian gq = functionals::fit_reference_gaussian(q);
  const Vector d = p.colwise().mean().transpose() - gq.mean;
  const auto llt = spd_cholesky(gq.cov, "Q covariance");
  return std::sqrt(d.dot(llt.solve(d)));
}

// ---------------------------------------------------------------------------
// 1D density estimates on a uniform grid of cell centers.

inline double grid_spacing(const Vector& grid) {
  if (grid.size() < 2) throw InvalidArgument("grid needs at least two nodes");
  const double dx = grid(1) - grid(0);
  if (!(dx > 0.0)) throw InvalidArgument("grid must be increasing");
  for (Index i = 1; i < grid.size(); ++i) {
    if (std::abs(grid(i) - grid(i - 1) - dx) > 1e-9 * (1.0 + std::abs(dx))) {
      throw InvalidArgument("grid must be uniform");
    }
  }
  return dx;
}

/// Histogram with cells centered at the grid nodes, normalized by 1/(N dx).
inline Vector hist1d(const Vector& samples, const Vector& grid) {
  if (samples.size() == 0) throw InvalidArgument("hist1d: empty samples");
  const double dx = grid_spacing(grid);
  Vector h = Vector::Zero(grid.size());
  const double left = grid(0) - 0.5 * dx;
  for (Index i = 0; i < samples.size(); ++i) {
    const double c = std::floor((samples(i) - left) / dx);
    if (c >= 0 && c < static_cast<double>(grid.size())) h(static_cast<Index>(c)) += 1.0;
  }
  return h / (static_cast<double>(samples.size()) * dx);
}

/// Gaussian kernel density estimate evaluated at the grid nodes (Silverman bandwidth if <= 0).
inline Vector kde1d(const Vector& samples, const Vector& grid, double bandwidth = 0.0) {
  if (samples.size() == 0) throw InvalidArgument("kde1d: empty samples");
  double bw = bandwidth;
  if (!(bw > 0.0)) {
    const double n = static_cast<double>(samples.size());
    const double sd = std::sqrt((samples.array() - samples.mean()).square().sum() / std::max(n - 1.0, 1.0));
    bw = 1.06 * std::max(sd, 1e-12) * std::pow(n, -0.2);
  }
  const double norm = 1.0 / (static_cast<double>(samples.size()) * bw * std::sqrt(2.0 * std::numbers::pi));
  Vector out(grid.size());
  for (Index g = 0; g < grid.size(); ++g) {
    out(g) = norm * (-0.5 * ((samples.array() - grid(g)) / bw).square()).exp().sum();
  }
  return out;
}

}  // namespace wgflow::metrics
