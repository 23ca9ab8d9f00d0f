#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "wgflow/analytic.hpp"

using namespace wgflow;
using namespace wgflow::analytic;

TEST(OU, IdentityDriftKeepsUnitCovariance) {
  const OUSpec s{Matrix::Identity(2, 2), (Vector(2) << 1.0, -2.0).finished()};
  for (double t : {0.0, 0.3, 2.0}) {
    EXPECT_LE((ou_moments(s, t).cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-14);
  }
  const Gaussian g0 = ou_moments(s, 0.0);
  EXPECT_LE(g0.mean.norm(), 1e-15);
}

TEST(OU, StationaryLimit) {
  const OUSpec s{(Matrix(2, 2) << 1.0, 0.2, 0.2, 2.0).finished(), (Vector(2) << 1.0, 1.0).finished()};
  const Gaussian g = ou_moments(s, 60.0);
  EXPECT_LE((g.mean - s.b).norm(), 1e-12);
  EXPECT_LE((g.cov - s.A.inverse()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((ou_stationary(s).cov - s.A.inverse()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OU, MomentsCompose) {
  // Propagate (mu_t, Sigma_t) by s with the general OU transition and compare with t + s.
  const OUSpec s{(Matrix(2, 2) << 1.0, 0.3, 0.3, 2.0).finished(), (Vector(2) << 0.5, -1.0).finished()};
  const double t = 0.4, dt = 0.7;
  const Gaussian gt = ou_moments(s, t);
  const Matrix e = symmetric_matrix_function(s.A, [dt](double l) { return std::exp(-l * dt); });
  const Matrix ainv = s.A.inverse();
  const Vector mean = e * gt.mean + (Matrix::Identity(2, 2) - e) * s.b;
  const Matrix cov = e * gt.cov * e + ainv - e * ainv * e;
  const Gaussian direct = ou_moments(s, t + dt);
  EXPECT_LE((direct.mean - mean).norm(), 1e-12);
  EXPECT_LE((direct.cov - cov).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OU, RejectsIndefiniteMatrix) {
  EXPECT_THROW(validate(OUSpec{-Matrix::Identity(2, 2), Vector::Zero(2)}), InvalidArgument);
  EXPECT_THROW(ou_moments(OUSpec{Matrix::Identity(2, 2), Vector::Zero(2)}, -1.0), InvalidArgument);
}

TEST(Barenblatt, Exponents) {
  BarenblattSpec s;
  EXPECT_NEAR(s.alpha(), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.beta(), 1.0 / 12.0, 1e-15);
}

TEST(Barenblatt, ZeroOutsideSupport) {
  BarenblattSpec s;
  const double r = barenblatt_support_radius(s, 0.003);
  EXPECT_EQ(barenblatt_density(s, 0.003, Vector::Constant(1, r * 1.0001)), 0.0);
  EXPECT_GT(barenblatt_density(s, 0.003, Vector::Constant(1, r * 0.99)), 0.0);
}

namespace {

double mass(const BarenblattSpec& s, double t) {
  const double r = barenblatt_support_radius(s, t);
  const int n = 100000;
  const double h = 2.0 * r / n;
  double m = 0.0;
  for (int i = 0; i < n; ++i) m += h * barenblatt_density(s, t, Vector::Constant(1, -r + (i + 0.5) * h));
  return m;
}

}  // namespace

TEST(Barenblatt, MassAtReferenceTime) {
  // With C = (3/16)^{1/3} the profile carries mass 2 independently of t (the flow is rescaled by it).
  BarenblattSpec s;
  s.t0 = 0.001;
  EXPECT_NEAR(mass(s, 0.0), 2.0, 0.01 * 2.0);
}

TEST(Barenblatt, MassConservedAcrossTime) {
  BarenblattSpec s;
  const double m0 = mass(s, 0.0);
  for (double t : {0.001, 0.004, 0.008, 0.1}) EXPECT_NEAR(mass(s, t), m0, 0.01 * m0);
}

TEST(Barenblatt, SamplerMatchesProfile) {
  BarenblattSpec s;
  Rng rng(1);
  const Matrix x = barenblatt_sample_1d(s, 0.004, rng, 200000);
  const double r = barenblatt_support_radius(s, 0.004);
  EXPECT_LE(x.cwiseAbs().maxCoeff(), r);
  // Second moment of the normalized profile (1 - x^2/r^2 shape): r^2 / 5.
  EXPECT_NEAR(x.array().square().mean(), r * r / 5.0, 0.01 * r * r / 5.0);
}

TEST(GaussianJKO, ScalarRecursion) {
  const Vector eta = Vector::Constant(1, 1.0);
  EXPECT_NEAR(gaussian_jko_mean(eta, 1.0, 1)(0), 0.5, 1e-15);
  EXPECT_NEAR(gaussian_jko_mean(eta, 1.0, 2)(0), 0.75, 1e-15);
  EXPECT_NEAR(gaussian_jko_mean(eta, 1.0, 3)(0), 0.875, 1e-15);
  EXPECT_NEAR(gaussian_jko_mean(eta, 0.5, 200)(0), 1.0, 1e-12);
}

TEST(GaussianJKO, RestrictedKLDecay) {
  const Vector eta = (Vector(2) << 0.6, 0.8).finished();
  const double a = 0.5;
  for (int k = 0; k <= 5; ++k) {
    const Vector ek = gaussian_jko_mean(eta, a, k);
    EXPECT_NEAR(0.5 * (ek - eta).squaredNorm(), 0.5 * eta.squaredNorm() * std::pow(1.0 + a, -2.0 * k), 1e-14);
  }
}

TEST(GaussianJKO, RecursionIsFixedPointOfExactStep) {
  const Vector eta = (Vector(2) << 0.6, 0.8).finished();
  const double a = 0.7;
  const auto steps = gaussian_jko_recursion(eta, a, 6);
  for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
    const Vector beta = a * (eta - steps[k].mean) / (1.0 + a);
    EXPECT_LE((steps[k].mean + beta - steps[k + 1].mean).norm(), 1e-15);
  }
}

TEST(AggregationSteady, ClosedFormValues) {
  EXPECT_NEAR(aggregation_steady_1d(0.0), std::sqrt(2.0) / std::numbers::pi, 1e-15);
  EXPECT_EQ(aggregation_steady_1d(std::sqrt(2.0)), 0.0);
  EXPECT_EQ(aggregation_steady_1d(-2.0), 0.0);
  const int n = 200000;
  const double r = std::sqrt(2.0), h = 2.0 * r / n;
  double m0 = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = -r + (i + 0.5) * h;
    m0 += h * aggregation_steady_1d(x);
    m2 += h * x * x * aggregation_steady_1d(x);
  }
  EXPECT_NEAR(m0, 1.0, 1e-6);
  EXPECT_NEAR(m2, aggregation_steady_second_moment, 1e-6);
}

TEST(GMM, SingleComponentIsGaussian) {
  const Gaussian g{(Vector(2) << 1, -1).finished(), (Matrix(2, 2) << 1.0, 0.3, 0.3, 0.5).finished()};
  const GMMSpec s{{g.mean}, {g.cov}, {1.0}};
  Rng rng(2);
  const Matrix x = standard_normal(rng, 10, 2);
  EXPECT_LE((gmm_log_density(s, x) - g.log_density(x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GMM, SymmetricPairAtOrigin) {
  const Vector c = (Vector(2) << 1.5, 0.0).finished();
  const GMMSpec s = spherical_gmm({c, -c}, 0.5);
  const Gaussian g1{c, 0.25 * Matrix::Identity(2, 2)};
  const double avg = g1.log_density(Matrix::Zero(1, 2))(0);  // both components equal at 0
  EXPECT_NEAR(gmm_log_density(s, Matrix::Zero(1, 2))(0), avg, 1e-12);
}

TEST(GMM, ScoreMatchesFiniteDifferences) {
  const GMMSpec s = spherical_gmm({Vector::Constant(2, 1.5), Vector::Constant(2, -1.5)}, 0.5);
  const Matrix x = (Matrix(1, 2) << 0.3, -0.2).finished();
  Vector l;
  Matrix sc;
  gmm_log_density_and_score(s, x, l, sc);
  for (Index j = 0; j < 2; ++j) {
    Matrix xp = x, xm = x;
    xp(0, j) += 1e-6;
    xm(0, j) -= 1e-6;
    EXPECT_NEAR(sc(0, j), (gmm_log_density(s, xp)(0) - gmm_log_density(s, xm)(0)) / 2e-6, 1e-6);
  }
}

TEST(GMM, SampleFrequencies) {
  GMMSpec s = spherical_gmm({Vector::Constant(1, -10.0), Vector::Constant(1, 10.0)}, 0.5);
  s.weights = {0.3, 0.7};
  const Index N = 100000;
  Rng rng(5);
  const Matrix x = gmm_sample(s, N, rng);
  const double freq = (x.array() < 0.0).cast<double>().mean();
  EXPECT_NEAR(freq, 0.3, 3.0 * std::sqrt(0.3 * 0.7 / N));
}

TEST(GMM, ValidationErrors) {
  GMMSpec s = spherical_gmm({Vector::Zero(2)}, 0.5);
  s.weights = {-1.0};
  EXPECT_THROW(validate(s), InvalidArgument);
}
