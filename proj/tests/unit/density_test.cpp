#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "wgflow/density.hpp"

using namespace wgflow;
using namespace wgflow::density;
using models::ConvexPotential;

namespace {

ConvexPotential random_icnn(std::uint64_t seed, Index n, double s = 0.05, double jitter = 0.5) {
  Rng rng(seed);
  ConvexPotential::Config c;
  c.dim = n;
  c.hidden = {8, 8};
  c.strong_convexity = s;
  ConvexPotential p(c, rng);
  for (auto* q : p.parameters()) q->value += jitter * standard_normal(rng, q->value.rows(), q->value.cols());
  p.project_nonneg();
  return p;
}

ConvexPotential half_norm(Index n) {
  return ConvexPotential::quadratic(Matrix::Zero(n, n), RowVector::Zero(n), 1.0);
}

}  // namespace

TEST(InvertMap, ClosedFormExamples) {
  const Vector y = (Vector(2) << 3, 4).finished();
  EXPECT_LE((invert_map(half_norm(2), y) - y).norm(), 1e-12);
  const ConvexPotential q = ConvexPotential::quadratic(Eigen::Vector2d(2, 4).asDiagonal().toDenseMatrix(),
                                                      (RowVector(2) << 1, 1).finished(), 0.0);
  EXPECT_LE((invert_map(q, (Vector(2) << 3, 5).finished()) - Vector::Ones(2)).norm(), 1e-10);
}

TEST(InvertMap, RoundTripRandomIcnn) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ConvexPotential p = random_icnn(seed, 2);
    Rng rng(seed + 50);
    for (int i = 0; i < 100; ++i) {
      const Vector x0 = 1.5 * standard_normal(rng, 2, 1).col(0);
      const Vector y = models::icnn_gradient(p, x0);
      const Vector x = invert_map(p, y);
      EXPECT_LE((x - x0).norm(), 1e-6);
      EXPECT_LE((models::icnn_gradient(p, x) - y).norm(), 1e-6);
    }
  }
}

TEST(InvertMap, RejectsLargeDimensionsAndBadTolerance) {
  EXPECT_THROW(invert_map(half_norm(9), Vector::Zero(9)), InvalidArgument);
  InversionOptions opt;
  opt.tol = 0.0;
  EXPECT_THROW(invert_map(half_norm(2), Vector::Zero(2), opt), InvalidArgument);
}

TEST(LogDetHessian, Examples) {
  EXPECT_NEAR(log_det_hessian(half_norm(3), Vector::Random(3)), 0.0, 1e-14);
  const ConvexPotential q =
      ConvexPotential::quadratic(Eigen::Vector2d(2, 4).asDiagonal().toDenseMatrix(), RowVector::Zero(2), 0.0);
  EXPECT_NEAR(log_det_hessian(q, Vector::Zero(2)), std::log(8.0), 1e-12);
  const ConvexPotential p = random_icnn(7, 3);
  const Vector x = (Vector(3) << 0.2, -0.4, 1.0).finished();
  const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(models::icnn_hessian(p, x)).eigenvalues();
  EXPECT_NEAR(log_det_hessian(p, x), ev.array().log().sum(), 1e-8);
}

TEST(LogDensity, IdentityMapKeepsBase) {
  const Gaussian base = standard_gaussian(2);
  const auto chain = gaussian_chain(base, {half_norm(2)});
  const Vector y = (Vector(2) << 0.3, -1.1).finished();
  EXPECT_NEAR(log_density(chain, y), base.log_density(Matrix(y.transpose()))(0), 1e-12);
}

TEST(LogDensity, AffineChangeOfVariables1D) {
  // phi(x) = x^2 so grad phi = 2x: N(0,1) -> N(0,4).
  const ConvexPotential phi = ConvexPotential::quadratic(Matrix::Constant(1, 1, 2.0), RowVector::Zero(1), 0.0);
  const auto chain = gaussian_chain(standard_gaussian(1), {phi});
  const Gaussian target{Vector::Zero(1), Matrix::Constant(1, 1, 4.0)};
  for (double y : {-3.0, -0.5, 0.0, 1.7}) {
    EXPECT_NEAR(log_density(chain, Vector(Vector::Constant(1, y))), target.log_density(Matrix::Constant(1, 1, y))(0), 1e-10);
  }
}

TEST(LogDensity, AffineChainMatchesPushforwardGaussian) {
  Rng rng(3);
  const Matrix A = (Matrix(2, 2) << 1.5, 0.3, 0.3, 0.8).finished();
  const Matrix B = (Matrix(2, 2) << 0.7, -0.1, -0.1, 1.2).finished();
  const RowVector a = (RowVector(2) << 0.2, -0.4).finished(), b = (RowVector(2) << -1.0, 0.5).finished();
  const Gaussian base{(Vector(2) << 0.5, 0.0).finished(), (Matrix(2, 2) << 1.0, 0.2, 0.2, 0.5).finished()};
  const auto chain =
      gaussian_chain(base, {ConvexPotential::quadratic(A, a, 0.0), ConvexPotential::quadratic(B, b, 0.0)});
  // x -> A x + a, then B y + b.
  const Matrix L = B * A;
  const Gaussian push{L * base.mean + B * a.transpose() + b.transpose(), L * base.cov * L.transpose()};
  for (int i = 0; i < 20; ++i) {
    const Vector y = push.mean + standard_normal(rng, 2, 1).col(0);
    EXPECT_NEAR(log_density(chain, y), push.log_density(Matrix(y.transpose()))(0), 1e-8);
  }
}

TEST(LogDensity, InsertingIdentityIsNeutral) {
  const ConvexPotential p = random_icnn(8, 2);
  const auto c1 = gaussian_chain(standard_gaussian(2), {p});
  const auto c2 = gaussian_chain(standard_gaussian(2), {p, half_norm(2)});
  const Vector y = (Vector(2) << 0.4, 0.9).finished();
  EXPECT_NEAR(log_density(c1, y), log_density(c2, y), 1e-10);
}

TEST(LogDensity, ChainSumsPerStepContributions) {
  const ConvexPotential p1 = random_icnn(9, 2), p2 = random_icnn(10, 2);
  const auto chain = gaussian_chain(standard_gaussian(2), {p1, p2});
  const Vector y = (Vector(2) << -0.3, 0.6).finished();
  const Vector x1 = invert_map(p2, y);
  const Vector x0 = invert_map(p1, x1);
  const double expected =
      standard_gaussian(2).log_density(Matrix(x0.transpose()))(0) - log_det_hessian(p1, x0) - log_det_hessian(p2, x1);
  EXPECT_NEAR(log_density(chain, y), expected, 1e-10);
}

TEST(LogDensity, Normalization1D) {
  const auto chain = gaussian_chain(standard_gaussian(1), {random_icnn(11, 1, 0.2, 0.3), random_icnn(12, 1, 0.2, 0.3),
                                                           random_icnn(13, 1, 0.2, 0.3)});
  // Integrate over the image of a wide base interval with the trapezoid rule.
  Matrix ends(2, 1);
  ends << -9.0, 9.0;
  Matrix img = ends;
  for (const auto& m : chain.maps) img = m(img);
  const int n = 4000;
  const double lo = img(0, 0), hi = img(1, 0), h = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    total += w * h * std::exp(log_density(chain, Vector(Vector::Constant(1, lo + i * h))));
  }
  EXPECT_NEAR(total, 1.0, 0.02);
}

TEST(LogDensity, Normalization2D) {
  const auto chain = gaussian_chain(standard_gaussian(2), {random_icnn(14, 2, 0.3, 0.2)});
  const int n = 120;
  const double L = 8.0, h = 2.0 * L / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Vector y = (Vector(2) << -L + (i + 0.5) * h, -L + (j + 0.5) * h).finished();
      total += h * h * std::exp(log_density(chain, y));
    }
  EXPECT_NEAR(total, 1.0, 0.02);
}
