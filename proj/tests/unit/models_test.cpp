#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "wgflow/models.hpp"

using namespace wgflow;
using namespace wgflow::models;
using ad::Tape;
using ad::Var;
using Eigen::Vector2d;

namespace {

ConvexPotential random_icnn(std::uint64_t seed, Index n, std::vector<Index> hidden = {8, 8}, double s = 0.01) {
  Rng rng(seed);
  ConvexPotential::Config c;
  c.dim = n;
  c.hidden = std::move(hidden);
  c.strong_convexity = s;
  ConvexPotential p(c, rng);
  // Move away from the identity initialization so the network part matters.
  for (Parameter* q : p.parameters()) {
    q->value += 0.5 * standard_normal(rng, q->value.rows(), q->value.cols());
  }
  p.project_nonneg();
  return p;
}

double min_eig(const Matrix& h) { return Eigen::SelfAdjointEigenSolver<Matrix>(h).eigenvalues().minCoeff(); }

}  // namespace

TEST(ResidualMap, IdentityAtInit) {
  Rng rng(1);
  ResidualMap m({2, {16, 16, 16}, 0.25}, rng);
  const Matrix x = (Matrix(1, 2) << 1, 2).finished();
  EXPECT_LE((m(x) - x).cwiseAbs().maxCoeff(), 1e-12);
  const Matrix many = standard_normal(rng, 50, 2);
  EXPECT_LE((m(many) - many).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConvexPotential, IdentityAtInit) {
  Rng rng(2);
  ConvexPotential::Config c;
  c.dim = 3;
  c.strong_convexity = 1.0;
  ConvexPotential p(c, rng);
  const Matrix x = standard_normal(rng, 40, 3);
  EXPECT_LE((p(x) - x).cwiseAbs().maxCoeff(), 1e-12);
  c.strong_convexity = 0.01;
  ConvexPotential q(c, rng);
  EXPECT_LE((q(x) - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConvexPotential, QuadraticGradientAndHessian) {
  const Matrix S = Vector2d(2, 3).asDiagonal();
  const RowVector c = (RowVector(2) << 1, 0).finished();
  const ConvexPotential p = ConvexPotential::quadratic(S, c, 0.0);
  const Matrix y = p((Matrix(1, 2) << 1, 1).finished());
  EXPECT_NEAR(y(0, 0), 3.0, 1e-14);
  EXPECT_NEAR(y(0, 1), 3.0, 1e-14);

  const ConvexPotential half = ConvexPotential::quadratic(Matrix::Zero(2, 2), RowVector::Zero(2), 1.0);
  const Matrix x = (Matrix(1, 2) << 0.3, -1.7).finished();
  EXPECT_LE((half(x) - x).cwiseAbs().maxCoeff(), 1e-14);

  const double s = 0.3;
  const ConvexPotential ps = ConvexPotential::quadratic(S, c, s);
  const Matrix h = potential_hessian(ps, Vector2d(0.4, -2.0));
  EXPECT_LE((h - (S + s * Matrix::Identity(2, 2))).cwiseAbs().maxCoeff(), 1e-12);
  const ConvexPotential only_s = ConvexPotential::quadratic(Matrix::Zero(2, 2), RowVector::Zero(2), 0.25);
  EXPECT_LE((only_s(x) - 0.25 * x).cwiseAbs().maxCoeff(), 1e-14);
}

namespace {

// phi(x) = x^4 + x^2/2 in 1D.
struct QuarticPotential {
  Var gradient(Tape&, Var x) const { return ad::add(ad::scale(ad::pow(x, 3.0), 4.0), x); }
};

}  // namespace

TEST(PotentialHessian, QuarticClosedForm) {
  EXPECT_NEAR(potential_hessian(QuarticPotential{}, Vector::Constant(1, 1.0))(0, 0), 13.0, 1e-12);
}

TEST(ConvexPotential, GradientMatchesFiniteDifferences) {
  const ConvexPotential p = random_icnn(3, 3);
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const Vector x = standard_normal(rng, 3, 1).col(0);
    auto phi = [&](const Vector& v) { return p.potential(Matrix(v.transpose()))(0); };
    const Vector fd = ad::finite_diff_grad(phi, x, 1e-5);
    const Vector g = icnn_gradient(p, x);
    EXPECT_LE((g - fd).norm() / std::max(1.0, g.norm()), 1e-5);
  }
}

TEST(ConvexPotential, HessianPsdAboveStrongConvexity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ConvexPotential p = random_icnn(seed, 2, {8, 8}, 0.05);
    Rng rng(seed + 100);
    for (int i = 0; i < 100; ++i) {
      const Vector x = 2.0 * standard_normal(rng, 2, 1).col(0);
      EXPECT_GE(min_eig(icnn_hessian(p, x)), p.strong_convexity() - 1e-8);
    }
  }
}

TEST(ConvexPotential, MonotoneGradientMap) {
  const ConvexPotential p = random_icnn(9, 3, {8, 8}, 0.1);
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    const Vector x = standard_normal(rng, 3, 1).col(0), y = standard_normal(rng, 3, 1).col(0);
    const double lhs = (icnn_gradient(p, x) - icnn_gradient(p, y)).dot(x - y);
    EXPECT_GE(lhs, 0.1 * (x - y).squaredNorm() - 1e-10);
  }
}

TEST(ConvexPotential, ProjectionClampsNegativeWeights) {
  ConvexPotential p = random_icnn(11, 2);
  Parameter& wz = p.param("Wz1");
  wz.value(0, 0) = -0.3;
  wz.value(0, 1) = 0.5;
  p.project_nonneg();
  EXPECT_EQ(wz.value(0, 0), 0.0);
  EXPECT_EQ(wz.value(0, 1), 0.5);
}

TEST(ConvexPotential, ConvexityHoldsAfterTraining) {
  Rng rng(12);
  ConvexPotential::Config c;
  c.dim = 2;
  c.hidden = {8, 8};
  ConvexPotential p(c, rng);
  const Matrix x = standard_normal(rng, 64, 2);
  // Push the map towards a non-monotone target; projection must keep it convex.
  const Matrix target = -x.rowwise().reverse() * 3.0;
  ad::Adam opt(p.parameters(), {0.05, 0.9, 0.999, 1e-8});
  for (int it = 0; it < 100; ++it) {
    Tape t;
    opt.zero_grad();
    t.backward(ad::mean(ad::sqnorm_rows(ad::sub(p.apply(t, t.constant(x)), t.constant(target)))));
    opt.step();
    p.project_nonneg();
  }
  for (int i = 0; i < 100; ++i) {
    EXPECT_GE(min_eig(icnn_hessian(p, 3.0 * standard_normal(rng, 2, 1).col(0))), c.strong_convexity - 1e-8);
  }
}

TEST(DualPotential, OutputRangesRespectTransform) {
  Rng rng(13);
  const Matrix z = 5.0 * standard_normal(rng, 10000, 2);
  for (auto tr : {OutputTransform::Softplus, OutputTransform::Square, OutputTransform::Sigmoid,
                  OutputTransform::ExpShift}) {
    DualPotential::Config c;
    c.dim = 2;
    c.transform = tr;
    DualPotential d(c, rng);
    const Matrix h = d(z);
    switch (tr) {
      case OutputTransform::Softplus: EXPECT_TRUE((h.array() > 0.0).all()); break;
      case OutputTransform::Square: EXPECT_TRUE((h.array() >= 0.0).all()); break;
      case OutputTransform::Sigmoid: EXPECT_TRUE((h.array() > 0.0 && h.array() < 1.0).all()); break;
      case OutputTransform::ExpShift: EXPECT_TRUE((h.array() > -1.0).all()); break;
      default: break;
    }
  }
}

TEST(DualPotential, LogApplyConsistent) {
  Rng rng(14);
  DualPotential::Config c;
  c.dim = 2;
  c.transform = OutputTransform::Sigmoid;
  const DualPotential d(c, rng);
  const Matrix z = standard_normal(rng, 20, 2);
  Tape t;
  const Matrix h = d.apply(t, t.constant(z)).value();
  const Matrix lh = d.log_apply(t, t.constant(z)).value();
  const Matrix lc = d.log_complement_apply(t, t.constant(z)).value();
  EXPECT_LE((lh.array().exp() - h.array()).abs().maxCoeff(), 1e-12);
  EXPECT_LE((lc.array().exp() - (1.0 - h.array())).abs().maxCoeff(), 1e-12);
}

TEST(ExpQuadraticDual, GaussianExpectationMatchesMonteCarlo) {
  ExpQuadraticDual g(2);
  g.set((RowVector(2) << 0.3, -0.2).finished(), 0.1);
  g.parameters()[2]->value = (Matrix(2, 2) << -0.2, 0.05, 0.05, -0.1).finished();
  const Gaussian p{Vector2d(0.5, -0.5), (Matrix(2, 2) << 1.0, 0.3, 0.3, 0.8).finished()};
  Tape t;
  const double exact = g.gaussian_expectation(t, p).scalar();
  Rng rng(15);
  const Matrix x = p.sample(rng, 400000);
  const double mc = g(x).mean();
  EXPECT_NEAR(exact, mc, 5e-3 * exact);
}

TEST(Models, JsonRoundTrip) {
  Rng rng(16);
  const AnyMap maps[] = {ResidualMap({2, {4, 4}, 0.25}, rng), AffineMap(2), random_icnn(17, 2)};
  const Matrix x = standard_normal(rng, 10, 2);
  for (const AnyMap& m : maps) {
    const AnyMap back = map_from_json(json::parse(to_json(m).dump()));
    EXPECT_TRUE((apply(m, x).array() == apply(back, x).array()).all());
  }
  DualPotential::Config c;
  c.dim = 2;
  const AnyDual d = DualPotential(c, rng);
  const AnyDual db = dual_from_json(json::parse(to_json(d).dump()));
  EXPECT_TRUE((apply(d, x).array() == apply(db, x).array()).all());
}
