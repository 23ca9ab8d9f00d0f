#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "wgflow/autodiff.hpp"
#include "wgflow/random.hpp"

namespace ad = wgflow::ad;
using ad::Tape;
using ad::Var;
using wgflow::Index;
using wgflow::Matrix;
using wgflow::Rng;
using wgflow::Vector;

namespace {

double rel_err(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1.0, std::max(a.norm(), b.norm()));
}

Matrix as_row(const Vector& v) { return Matrix(v.transpose()); }

}  // namespace

TEST(Autodiff, ForwardExamples) {
  Tape t;
  Var x = t.variable(Matrix::Constant(1, 1, 3.0));
  EXPECT_DOUBLE_EQ(ad::square(x).scalar(), 9.0);
  Var v = t.constant((Matrix(1, 2) << 1, 2).finished());
  Var eye = t.constant(Matrix::Identity(2, 2));
  Var r = ad::matmul(v, eye);
  EXPECT_DOUBLE_EQ(r.value()(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r.value()(0, 1), 2.0);
  EXPECT_NEAR(ad::softplus(t.constant(0.0)).scalar(), std::log(2.0), 1e-15);
}

TEST(Autodiff, BackwardExamples) {
  Tape t;
  Var x = t.variable(Matrix::Constant(1, 1, 3.0));
  t.backward(ad::square(x));
  EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 6.0);

  Tape t2;
  Vector a(3);
  a << 1.0, -2.0, 0.5;
  Var xv = t2.variable(Matrix::Constant(3, 1, 0.7));
  Var av = t2.constant(as_row(a));
  t2.backward(ad::matmul(av, xv));
  EXPECT_TRUE(t2.grad(xv).col(0).isApprox(a, 1e-15));
}

TEST(Autodiff, FiniteDiffExamples) {
  auto sq = [](const Vector& x) { return x(0) * x(0); };
  EXPECT_NEAR(ad::finite_diff_grad(sq, Vector::Constant(1, 3.0), 1e-4)(0), 6.0, 1e-6);
  auto f = [](const Vector& x) { return std::sin(x(0)) + x(1) * x(1); };
  const Vector g = ad::finite_diff_grad(f, (Vector(2) << 0.0, 1.0).finished(), 1e-4);
  EXPECT_NEAR(g(0), 1.0, 1e-6);
  EXPECT_NEAR(g(1), 2.0, 1e-6);
}

namespace {

// A small two-hidden-layer network exercising every differentiable op; returns a scalar loss.
struct RandomNet {
  Matrix w1, b1, w2, b2, w3, slope;
  double alpha;

  RandomNet(Rng& rng, Index n, Index h) {
    w1 = wgflow::standard_normal(rng, h, n);
    b1 = wgflow::standard_normal(rng, 1, h);
    w2 = wgflow::standard_normal(rng, h, h) * 0.5;
    b2 = wgflow::standard_normal(rng, 1, h);
    w3 = wgflow::standard_normal(rng, 1, h);
    slope = Matrix::Constant(1, 1, 0.25);
    alpha = 0.5 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  }

  Var loss(Tape& t, Var x) const {
    Var h1 = ad::celu(ad::affine(x, t.constant(w1), t.constant(b1)), alpha);
    Var h2 = ad::prelu(ad::affine(h1, t.constant(w2), t.constant(b2)), t.constant(slope));
    Var o = ad::matmul_nt(ad::softplus(h2), t.constant(w3));
    Var extra = ad::sum_rows(ad::sigmoid(ad::scale(ad::sqnorm_rows(x), 0.3)));
    Var e = ad::exp(ad::scale(ad::sum_cols(ad::celu_grad(x, alpha)), 0.1));
    Var p = ad::pow(ad::add_scalar(ad::square(x), 1.0), 1.5);
    Var l = ad::log(ad::add_scalar(ad::sum(p), 1.0));
    return ad::add(ad::add(ad::add(ad::mean(o), ad::sum(extra)), ad::sum(e)), l);
  }
};

}  // namespace

TEST(Autodiff, GradientMatchesFiniteDifferences100Cases) {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 1000);
    const Index n = 1 + seed % 4;
    const Index rows = 1 + seed % 3;
    RandomNet net(rng, n, 3 + seed % 5);
    const Matrix x0 = wgflow::standard_normal(rng, rows, n);
    Tape t;
    Var x = t.variable(x0);
    t.backward(net.loss(t, x));
    const Matrix g = t.grad(x);
    auto f = [&](const Vector& flat) {
      Tape tt;
      return net.loss(tt, tt.constant(Eigen::Map<const Matrix>(flat.data(), rows, n))).scalar();
    };
    const Vector flat = Eigen::Map<const Vector>(x0.data(), x0.size());
    const Vector fd = ad::finite_diff_grad(f, flat, 1e-5);
    const Vector an = Eigen::Map<const Vector>(g.data(), g.size());
    EXPECT_LE(rel_err(an, fd), 1e-5) << "seed " << seed;
  }
}

TEST(Autodiff, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(5);
  ad::Parameter w("w", wgflow::standard_normal(rng, 4, 3));
  const Matrix x = wgflow::standard_normal(rng, 6, 3);
  auto loss = [&](Tape& t, Var wv) { return ad::mean(ad::softplus(ad::matmul_nt(t.constant(x), wv))); };
  Tape t;
  t.backward(loss(t, t.param(w)));
  auto f = [&](const Vector& flat) {
    Tape tt;
    return loss(tt, tt.constant(Eigen::Map<const Matrix>(flat.data(), 4, 3))).scalar();
  };
  const Vector fd = ad::finite_diff_grad(f, Eigen::Map<const Vector>(w.value.data(), 12), 1e-5);
  EXPECT_LE(rel_err(Eigen::Map<const Vector>(w.grad.data(), 12), fd), 1e-5);
}

TEST(Autodiff, Linearity) {
  Rng rng(3);
  const Matrix x0 = wgflow::standard_normal(rng, 3, 2);
  auto f = [](Var x) { return ad::sum(ad::softplus(x)); };
  auto g = [](Var x) { return ad::sum(ad::square(ad::exp(ad::scale(x, 0.5)))); };
  auto grad_of = [&](auto&& fn) {
    Tape t;
    Var x = t.variable(x0);
    t.backward(fn(x));
    return t.grad(x);
  };
  const double alpha = 0.7, beta = -1.3;
  const Matrix combined = grad_of([&](Var x) { return ad::add(ad::scale(f(x), alpha), ad::scale(g(x), beta)); });
  const Matrix separate = alpha * grad_of(f) + beta * grad_of(g);
  EXPECT_LE((combined - separate).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Autodiff, Determinism) {
  auto run = [] {
    Rng rng(11);
    RandomNet net(rng, 3, 5);
    Tape t;
    Var x = t.variable(wgflow::standard_normal(rng, 4, 3));
    Var l = net.loss(t, x);
    t.backward(l);
    return std::make_pair(l.scalar(), t.grad(x));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_TRUE((a.second.array() == b.second.array()).all());
}

TEST(Autodiff, LogOfNonPositiveThrows) {
  Tape t;
  EXPECT_THROW(ad::log(t.constant(0.0)), wgflow::Error);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ad::Parameter p("p", Matrix::Constant(2, 2, 1.5));
  ad::Adam opt({&p}, {0.1, 0.9, 0.999, 1e-8});
  p.zero_grad();
  opt.step();
  EXPECT_TRUE((p.value.array() == 1.5).all());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ad::Parameter p("p", Matrix::Constant(1, 1, 0.0));
  ad::Adam opt({&p}, {0.1, 0.9, 0.999, 1e-12});
  p.grad = Matrix::Constant(1, 1, 1.0);
  opt.step();
  EXPECT_NEAR(p.value(0, 0), -0.1, 1e-9);
}

TEST(Adam, ThreeStepsOnSquareMatchHandRecursion) {
  // Independent scalar recursion for f(x) = x^2 from x = 1.
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double x = 1.0, m = 0.0, v = 0.0;
  for (int k = 1; k <= 3; ++k) {
    const double g = 2.0 * x;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, k))) / (std::sqrt(v / (1 - std::pow(b2, k))) + eps);
  }
  ad::Parameter p("x", Matrix::Constant(1, 1, 1.0));
  ad::Adam opt({&p}, {lr, b1, b2, eps});
  for (int k = 0; k < 3; ++k) {
    Tape t;
    opt.zero_grad();
    t.backward(ad::sum(ad::square(t.param(p))));
    opt.step();
  }
  EXPECT_NEAR(p.value(0, 0), x, 1e-14);
}
