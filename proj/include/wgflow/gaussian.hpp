#pragma once

// Dense Gaussian helpers shared by the reference measures, oracles and metrics.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>

#include "wgflow/error.hpp"
#include "wgflow/random.hpp"

namespace wgflow {

/// Applies a scalar function to the spectrum of a symmetric matrix.
template <class F>
Matrix symmetric_matrix_function(const Matrix& a, F&& f) {
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw Error("eigendecomposition failed");
  const Vector mapped = eig.eigenvalues().unaryExpr(f);
  return eig.eigenvectors() * mapped.asDiagonal() * eig.eigenvectors().transpose();
}

inline double min_eigenvalue(const Matrix& a) {
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

/// Cholesky factor of a symmetric positive definite matrix, or throws naming `what`.
inline Eigen::LLT<Matrix> spd_cholesky(const Matrix& a, const std::string& what) {
  if (a.rows() != a.cols()) throw InvalidArgument(what + ": matrix is not square");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + a.cwiseAbs().maxCoeff())) {
    throw InvalidArgument(what + ": matrix is not symmetric");
  }
  Eigen::LLT<Matrix> llt(0.5 * (a + a.transpose()));
  if (llt.info() != Eigen::Success) throw InvalidArgument(what + ": matrix is not positive definite");
  return llt;
}

inline double log_det_spd(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

struct Gaussian {
  Vector mean;
  Matrix cov;

  Index dim() const { return mean.size(); }

  /// Log-density of every row of x.
  Vector log_density(const Matrix& x) const {
    const auto llt = spd_cholesky(cov, "Gaussian covariance");
    const Index n = dim();
    const Matrix centered = (x.rowwise() - mean.transpose()).transpose();
    const Matrix solved = llt.matrixL().solve(centered);
    const Vector quad = solved.colwise().squaredNorm().transpose();
    const double norm = -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + log_det_spd(llt));
    return (norm - 0.5 * quad.array()).matrix();
  }

  /// Score (gradient of the log-density) of every row of x.
  Matrix score(const Matrix& x) const {
    const auto llt = spd_cholesky(cov, "Gaussian covariance");
    const Matrix centered = (x.rowwise() - mean.transpose()).transpose();
    return -llt.solve(centered).transpose();
  }

  Matrix sample(Rng& rng, Index count) const {
    const auto llt = spd_cholesky(cov, "Gaussian covariance");
    const Matrix z = standard_normal(rng, count, dim());
    return (z * llt.matrixL().transpose()).rowwise() + mean.transpose();
  }
};

inline Gaussian standard_gaussian(Index n) { return {Vector::Zero(n), Matrix::Identity(n, n)}; }

/// Empirical mean and (biased, 1/N) covariance of the rows of x.
inline Gaussian empirical_gaussian(const Matrix& x) {
  const double n = static_cast<double>(x.rows());
  Gaussian g;
  g.mean = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / n;
  return g;
}

}  // namespace wgflow
