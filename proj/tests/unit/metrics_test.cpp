#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "wgflow/metrics.hpp"

using namespace wgflow;
using namespace wgflow::metrics;

namespace {

Gaussian gauss2(double m0, double m1, double v0, double v1, double c = 0.0) {
  return {(Vector(2) << m0, m1).finished(), (Matrix(2, 2) << v0, c, c, v1).finished()};
}

SampledDensity sampled(const Gaussian& g) {
  return {[g](const Matrix& x) { return g.log_density(x); }, [g](Rng& r, Index n) { return g.sample(r, n); }};
}

}  // namespace

TEST(SymKL, ClosedFormExamples) {
  EXPECT_NEAR(symkl(gauss2(0, 0, 1, 1), gauss2(0, 0, 1, 1)), 0.0, 1e-14);
  // Equal covariances: symmetric KL = Mahalanobis distance squared.
  EXPECT_NEAR(symkl(gauss2(0, 0, 1, 1), gauss2(1, 0, 1, 1)), 1.0, 1e-14);
  // 1D variances 1 and 4: (1/4 + 4 - 2)/2 = 1.125.
  const Gaussian a{Vector::Zero(1), Matrix::Constant(1, 1, 1.0)}, b{Vector::Zero(1), Matrix::Constant(1, 1, 4.0)};
  EXPECT_NEAR(symkl(a, b), 1.125, 1e-14);
}

TEST(SymKL, Symmetric) {
  const Gaussian p = gauss2(0.3, -1, 1.2, 0.7, 0.2), q = gauss2(-0.5, 0.4, 0.5, 2.0, -0.3);
  EXPECT_NEAR(symkl(p, q), symkl(q, p), 1e-14);
  EXPECT_GT(symkl(p, q), 0.0);
}

TEST(SymKL, MonteCarloMatchesClosedForm) {
  const Gaussian p = gauss2(0.3, -1, 1.2, 0.7, 0.2), q = gauss2(-0.5, 0.4, 0.5, 2.0, -0.3);
  Rng rng(3);
  const Estimate e = symkl_mc(sampled(p), sampled(q), 200000, rng);
  EXPECT_NEAR(e.value, symkl(p, q), 4.0 * e.stderr_);
  EXPECT_GT(e.stderr_, 0.0);
}

TEST(KSD, ExactSamplesStayInNullBand) {
  const Gaussian q = gauss2(0, 0, 1, 1);
  Rng rng(4);
  for (int rep = 0; rep < 5; ++rep) {
    const Matrix x = q.sample(rng, 500);
    // The U-statistic is centered at zero under the null with spread O(1/N).
    EXPECT_LT(std::abs(ksd(x, q.score(x))), 0.05);
  }
}

TEST(KSD, DetectsShiftedSamples) {
  const Gaussian q = gauss2(0, 0, 1, 1);
  Rng rng(5);
  const Matrix x = q.sample(rng, 500);
  const Matrix shifted = x.array() + 1.0;
  EXPECT_GT(ksd(shifted, q.score(shifted)), 10.0 * std::abs(ksd(x, q.score(x))));
  EXPECT_GT(ksd(shifted, q.score(shifted)), 0.1);
}

TEST(KSD, ScaleEquivariance) {
  // Scaling samples and target by c with bandwidth c*h multiplies the statistic by 1/c^2.
  const Gaussian q = gauss2(0, 0, 1, 1);
  Rng rng(7);
  const Matrix x = q.sample(rng, 200).array() + 0.5;
  const double c = 3.0, h = 0.8;
  const Gaussian qc{q.mean, c * c * q.cov};
  const Matrix xc = c * x;
  EXPECT_NEAR(ksd(xc, qc.score(xc), {c * h}), ksd(x, q.score(x), {h}) / (c * c), 1e-12);
}

TEST(KSD, RejectsBadShapes) {
  EXPECT_THROW(ksd(Matrix::Zero(1, 2), Matrix::Zero(1, 2)), InvalidArgument);
  EXPECT_THROW(ksd(Matrix::Zero(3, 2), Matrix::Zero(3, 1)), InvalidArgument);
}

TEST(MomentGap, MatchesDirectionSearch) {
  Rng rng(8);
  const Matrix q = gauss2(0, 0, 2.0, 0.5, 0.3).sample(rng, 5000);
  const Matrix p = gauss2(0.4, -0.2, 1, 1).sample(rng, 3000);
  // Brute force over unit directions u of sup (mean_P - mean_Q) . u / sqrt(u^T Sigma_Q u).
  const Vector d = p.colwise().mean().transpose() - q.colwise().mean().transpose();
  const Matrix c = q.rowwise() - q.colwise().mean();
  const Matrix cov = c.transpose() * c / static_cast<double>(q.rows());  // maximum-likelihood fit
  double best = 0.0;
  for (int k = 0; k < 20000; ++k) {
    const double t = std::numbers::pi * k / 20000.0;
    const Vector u = (Vector(2) << std::cos(t), std::sin(t)).finished();
    best = std::max(best, std::abs(d.dot(u)) / std::sqrt(u.dot(cov * u)));
  }
  EXPECT_NEAR(moment_gap(p, q), best, 1e-6);
}

TEST(MomentGap, ZeroForSameSample) {
  Rng rng(9);
  const Matrix q = gauss2(1, 2, 1, 1).sample(rng, 100);
  EXPECT_NEAR(moment_gap(q, q), 0.0, 1e-12);
}

TEST(Hist1D, NormalizedAndBinned) {
  const Vector grid = Vector::LinSpaced(4, 0.5, 3.5);  // cells [0,1), [1,2), [2,3), [3,4)
  const Vector s = (Vector(4) << 0.2, 1.5, 1.7, 3.9).finished();
  const Vector h = hist1d(s, grid);
  EXPECT_NEAR(h(0), 0.25, 1e-15);
  EXPECT_NEAR(h(1), 0.5, 1e-15);
  EXPECT_NEAR(h(2), 0.0, 1e-15);
  EXPECT_NEAR(h(3), 0.25, 1e-15);
  EXPECT_NEAR(h.sum() * 1.0, 1.0, 1e-15);
}

TEST(KDE1D, SinglePointIsGaussianBump) {
  const Vector grid = Vector::LinSpaced(5, -2.0, 2.0);
  const Vector k = kde1d(Vector::Zero(1), grid, 0.5);
  for (Index i = 0; i < grid.size(); ++i) {
    const double z = grid(i) / 0.5;
    EXPECT_NEAR(k(i), std::exp(-0.5 * z * z) / (0.5 * std::sqrt(2.0 * std::numbers::pi)), 1e-14);
  }
}

TEST(GridSpacing, RejectsNonUniform) {
  EXPECT_THROW(grid_spacing((Vector(3) << 0.0, 1.0, 3.0).finished()), InvalidArgument);
  EXPECT_THROW(grid_spacing(Vector::Zero(1)), InvalidArgument);
}
