#pragma once

// Closed-form reference solutions used as oracles.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "wgflow/error.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/random.hpp"

namespace wgflow::analytic {

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck: dX = -A (X - b) dt + sqrt(2) dW started from N(0, I),
// i.e. the Fokker-Planck flow towards exp(-(x-b)^T A (x-b) / 2).

struct OUSpec {
  Matrix A;
  Vector b;
};

inline void validate(const OUSpec& spec) {
  if (spec.A.rows() != spec.A.cols() || spec.A.rows() != spec.b.size()) {
    throw InvalidArgument("OU: A must be n x n and b of length n");
  }
  spd_cholesky(spec.A, "OU matrix A");
}

/// Mean and covariance at time t.
inline Gaussian ou_moments(const OUSpec& spec, double t) {
  validate(spec);
  if (t < 0.0) throw InvalidArgument("OU: t must be >= 0");
  const Index n = spec.b.size();
  const Matrix e1 = symmetric_matrix_function(spec.A, [t](double l) { return std::exp(-l * t); });
  const Matrix e2 = symmetric_matrix_function(spec.A, [t](double l) { return std::exp(-2.0 * l * t); });
  const Matrix a_inv = symmetric_matrix_function(spec.A, [](double l) { return 1.0 / l; });
  const Matrix id = Matrix::Identity(n, n);
  Gaussian g;
  g.mean = (id - e1) * spec.b;
  g.cov = a_inv * (id - e2) + e2;
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

/// Unnormalized target log-density of the OU stationary law.
inline Gaussian ou_stationary(const OUSpec& spec) {
  validate(spec);
  return {spec.b, symmetric_matrix_function(spec.A, [](double l) { return 1.0 / l; })};
}

// ---------------------------------------------------------------------------
// Barenblatt profile of dP/dt = Laplacian(P^m).

struct BarenblattSpec {
  double m = 2.0;
  int n = 1;
  double C = std::cbrt(3.0 / 16.0);
  double t0 = 0.002;
  Vector x0 = Vector::Zero(1);

  double alpha() const { return n / (n * (m - 1.0) + 2.0); }
  double beta() const { return (m - 1.0) * alpha() / (2.0 * m * n); }
};

inline void validate(const BarenblattSpec& s) {
  if (!(s.m > 1.0)) throw InvalidArgument("Barenblatt: m must exceed 1");
  if (s.n < 1 || s.x0.size() != s.n) throw InvalidArgument("Barenblatt: center dimension mismatch");
  if (!(s.C > 0.0) || !(s.t0 > 0.0)) throw InvalidArgument("Barenblatt: C and t0 must be positive");
}

/// Density at time t (the profile is evaluated at t + t0).
inline double barenblatt_density(const BarenblattSpec& s, double t, const Vector& x) {
  validate(s);
  if (t < 0.0) throw InvalidArgument("Barenblatt: t must be >= 0");
  const double tau = t + s.t0;
  const double r2 = (x - s.x0).squaredNorm();
  const double inner = s.C - s.beta() * r2 * std::pow(tau, -2.0 * s.alpha() / s.n);
  if (inner <= 0.0) return 0.0;
  return std::pow(tau, -s.alpha()) * std::pow(inner, 1.0 / (s.m - 1.0));
}

inline double barenblatt_support_radius(const BarenblattSpec& s, double t) {
  validate(s);
  return std::sqrt(s.C / s.beta()) * std::pow(t + s.t0, s.alpha() / s.n);
}

/// Exact samples of the 1D profile by inverse-CDF on a fine tabulation.
inline Matrix barenblatt_sample_1d(const BarenblattSpec& s, double t, Rng& rng, Index count) {
  validate(s);
  if (s.n != 1) throw InvalidArgument("Barenblatt sampler: only n = 1 is supported");
  const double r = barenblatt_support_radius(s, t);
  const int cells = 20000;
  std::vector<double> cdf(cells + 1, 0.0);
  const double h = 2.0 * r / cells;
  Vector x(1);
  for (int i = 0; i < cells; ++i) {
    x(0) = s.x0(0) - r + (i + 0.5) * h;
    cdf[i + 1] = cdf[i] + barenblatt_density(s, t, x) * h;
  }
  std::uniform_real_distribution<double> u(0.0, cdf.back());
  Matrix out(count, 1);
  for (Index k = 0; k < count; ++k) {
    const double v = u(rng);
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), v);
    const int i = std::clamp(static_cast<int>(it - cdf.begin()) - 1, 0, cells - 1);
    const double frac = (v - cdf[i]) / std::max(cdf[i + 1] - cdf[i], 1e-300);
    out(k, 0) = s.x0(0) - r + (i + std::clamp(frac, 0.0, 1.0)) * h;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact JKO for P0 = N(0, I), Q = N(eta, I) with shift maps and exp-linear duals.

struct GaussianJKOStep {
  Vector mean;   // eta_k
  Vector shift;  // beta_k (applied to reach eta_k)
  Vector alpha;
  double gamma = 0.0;
};

/// Entry k (k = 1..K) holds the step that maps P_{k-1} to P_k; entry 0 is P0.
inline std::vector<GaussianJKOStep> gaussian_jko_recursion(const Vector& eta, double a, int K) {
  if (!(a > 0.0)) throw InvalidArgument("gaussian_jko_recursion: a must be positive");
  if (K < 0) throw InvalidArgument("gaussian_jko_recursion: K must be >= 0");
  std::vector<GaussianJKOStep> out;
  GaussianJKOStep s0;
  s0.mean = Vector::Zero(eta.size());
  s0.shift = s0.alpha = Vector::Zero(eta.size());
  out.push_back(s0);
  for (int k = 1; k <= K; ++k) {
    const Vector prev = out.back().mean;
    GaussianJKOStep s;
    s.shift = a * (eta - prev) / (1.0 + a);
    s.mean = prev + s.shift;
    // Optimal dual for mu = N(prev, I): h = dP_k / dmu = exp(alpha^T (z - prev) - |alpha|^2/2)
    // written in the global coordinate.
    s.alpha = s.shift;
    s.gamma = -s.alpha.dot(prev) - 0.5 * s.alpha.squaredNorm();
    out.push_back(s);
  }
  return out;
}

inline Vector gaussian_jko_mean(const Vector& eta, double a, int k) {
  return eta * (1.0 - std::pow(1.0 + a, -static_cast<double>(k)));
}

// ---------------------------------------------------------------------------
// Steady state of the 1D aggregation equation with W(x) = x^2/2 - ln|x|.

inline double aggregation_steady_1d(double x) {
  const double v = 2.0 - x * x;
  return v > 0.0 ? std::sqrt(v) / std::numbers::pi : 0.0;
}

inline constexpr double aggregation_steady_second_moment = 0.5;
inline const double aggregation_steady_radius = std::sqrt(2.0);

// ---------------------------------------------------------------------------
// Gaussian mixtures.

struct GMMSpec {
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  std::vector<double> weights;

  Index dim() const { return means.empty() ? 0 : means.front().size(); }
};

inline void validate(const GMMSpec& g) {
  if (g.means.empty() || g.means.size() != g.covs.size() || g.means.size() != g.weights.size()) {
    throw InvalidArgument("GMM: means, covariances and weights must be non-empty and of equal count");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < g.means.size(); ++k) {
    if (g.weights[k] < 0.0) throw InvalidArgument("GMM: weights must be nonnegative");
    if (g.means[k].size() != g.dim()) throw InvalidArgument("GMM: component dimension mismatch");
    spd_cholesky(g.covs[k], "GMM covariance");
    total += g.weights[k];
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("GMM: weights must sum to 1");
}

/// Equal-weight spherical mixture.
inline GMMSpec spherical_gmm(const std::vector<Vector>& means, double sigma) {
  GMMSpec g;
  const Index n = means.front().size();
  for (const Vector& m : means) {
    g.means.push_back(m);
    g.covs.push_back(sigma * sigma * Matrix::Identity(n, n));
    g.weights.push_back(1.0 / static_cast<double>(means.size()));
  }
  return g;
}

/// Log-density and score of every row of x.
inline void gmm_log_density_and_score(const GMMSpec& g, const Matrix& x, Vector& logp, Matrix& score) {
  validate(g);
  const std::size_t K = g.means.size();
  const Index N = x.rows();
  Matrix comp(N, static_cast<Index>(K));
  std::vector<Matrix> scores(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Gaussian c{g.means[k], g.covs[k]};
    comp.col(static_cast<Index>(k)) = c.log_density(x).array() + std::log(std::max(g.weights[k], 1e-300));
    scores[k] = c.score(x);
  }
  logp.resize(N);
  score = Matrix::Zero(N, x.cols());
  for (Index i = 0; i < N; ++i) {
    const double mx = comp.row(i).maxCoeff();
    const Eigen::ArrayXd w = (comp.row(i).array() - mx).exp().transpose();
    const double tot = w.sum();
    logp(i) = mx + std::log(tot);
    for (std::size_t k = 0; k < K; ++k) score.row(i) += (w(static_cast<Index>(k)) / tot) * scores[k].row(i);
  }
}

inline Vector gmm_log_density(const GMMSpec& g, const Matrix& x) {
  Vector lp;
  Matrix s;
  gmm_log_density_and_score(g, x, lp, s);
  return lp;
}

inline Matrix gmm_sample(const GMMSpec& g, Index count, Rng& rng) {
  validate(g);
  std::discrete_distribution<std::size_t> pick(g.weights.begin(), g.weights.end());
  std::vector<Eigen::LLT<Matrix>> chol;
  for (const Matrix& c : g.covs) chol.push_back(spd_cholesky(c, "GMM covariance"));
  Matrix out(count, g.dim());
  for (Index i = 0; i < count; ++i) {
    const std::size_t k = pick(rng);
    const Matrix z = standard_normal(rng, 1, g.dim());
    out.row(i) = (chol[k].matrixL() * z.transpose()).transpose() + g.means[k].transpose();
  }
  return out;
}

inline Matrix gmm_sample(const GMMSpec& g, Index count, std::uint64_t seed) {
  Rng rng(seed);
  return gmm_sample(g, count, rng);
}

}  // namespace wgflow::analytic
