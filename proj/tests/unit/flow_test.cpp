#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "wgflow/flow.hpp"

using namespace wgflow;
using namespace wgflow::flow;
using models::ConvexPotential;

namespace {

JKOConfig gaussian_config(double a, int K) {
  JKOConfig c;
  c.a = a;
  c.K = K;
  c.J1 = 200;
  c.J2 = 5;
  c.lr_map = 0.02;
  c.lr_dual = 0.02;
  c.lr_final_fraction = 0.05;
  c.full_batch = true;
  c.particles = 2000;
  c.seed = 3;
  c.map.kind = MapKind::Affine;
  c.map.hidden.clear();
  c.dual.kind = DualKind::ExpQuadratic;
  return c;
}

FlowSpec gaussian_spec(const Vector& eta, double a, int K) {
  FlowSpec s;
  s.config = gaussian_config(a, K);
  s.objective = Objective::kl(targets::gaussian_target({eta, Matrix::Identity(2, 2)}));
  s.objective.exact_reference = true;
  s.p0 = standard_gaussian(2);
  return s;
}

FlowSpec tiny_spec() {
  FlowSpec s;
  s.config.a = 0.1;
  s.config.K = 2;
  s.config.J1 = 5;
  s.config.M = 32;
  s.config.particles = 64;
  s.config.seed = 9;
  s.config.map.hidden = {4};
  s.config.dual.hidden = {4};
  s.objective = Objective::kl(targets::gaussian_target(standard_gaussian(2)));
  s.p0 = Gaussian{Vector::Constant(2, 1.0), Matrix::Identity(2, 2)};
  return s;
}

Vector col_mean(const Matrix& x) { return x.colwise().mean().transpose(); }

}  // namespace

TEST(Flow, StaysPutWhenAlreadyAtTarget) {
  const FlowSpec s = gaussian_spec(Vector::Zero(2), 1.0, 1);
  const FlowState st = run_flow(s);
  Rng rng(derive_seed(s.config.seed, 0x5eedULL << 32));
  const Matrix x0 = sample(s.p0, rng, s.config.particles);
  const Matrix x1 = push_forward(st, 1, x0);
  // Only the sampling error of the empirical moments (about 1/sqrt(N)) is left to correct.
  EXPECT_LE(std::sqrt((x1 - x0).rowwise().squaredNorm().mean()), 0.03);
}

TEST(Flow, GaussianMeansFollowExactStep) {
  const Vector eta = (Vector(2) << 0.6, 0.8).finished();
  const double a = 1.0;
  const FlowSpec s = gaussian_spec(eta, a, 3);
  const FlowState st = run_flow(s);
  Rng rng(derive_seed(s.config.seed, 0x5eedULL << 32));
  const Matrix x0 = sample(s.p0, rng, s.config.particles);
  for (int k = 1; k <= 3; ++k) {
    const Vector before = col_mean(push_forward(st, k - 1, x0));
    const Vector after = col_mean(push_forward(st, k, x0));
    // One exact step moves the mean by a (eta - mean) / (1 + a).
    EXPECT_LE((after - before - a * (eta - before) / (1.0 + a)).norm(), 0.01) << "step " << k;
  }
}

TEST(Flow, TransportCostMatchesDisplacement) {
  const FlowSpec s = gaussian_spec((Vector(2) << 0.6, 0.8).finished(), 0.5, 1);
  Rng rng(derive_seed(s.config.seed, 0x5eedULL << 32));
  const Matrix x0 = sample(s.p0, rng, s.config.particles);
  const StepResult r = jko_step(x0, s.objective, s.config, 1);
  const double cost = (models::apply(r.map, x0) - x0).rowwise().squaredNorm().mean() / (2.0 * s.config.a);
  EXPECT_NEAR(r.log.transport_cost, cost, 1e-12);
  EXPECT_GT(r.log.transport_cost, 0.0);
  EXPECT_EQ(static_cast<int>(r.log.transport_trace.size()), s.config.J1);
}

TEST(Flow, PushForwardComposesAffineMaps) {
  const Matrix A = (Matrix(2, 2) << 2.0, 0.5, 0.5, 1.0).finished();
  const RowVector c = (RowVector(2) << 1.0, -1.0).finished();
  FlowState st;
  st.p0 = standard_gaussian(2);
  st.records.emplace_back(TrainedMap{ConvexPotential::quadratic(A, c, 0.0)});
  st.records.emplace_back(TrainedMap{ConvexPotential::quadratic(Matrix::Zero(2, 2), RowVector::Zero(2), 3.0)});
  st.round_end = {1, 2};
  const Matrix x = (Matrix(2, 2) << 1.0, 0.0, -1.0, 2.0).finished();
  const Matrix expect1 = (x * A).rowwise() + c;
  EXPECT_LE((push_forward(st, 1, x) - expect1).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((push_forward(st, 2, x) - 3.0 * expect1).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(push_forward(st, 3, x), InvalidArgument);
  const auto chain = invertible_chain(st, 2);
  EXPECT_EQ(chain.maps.size(), 2u);
}

TEST(ForwardStep, ZeroStepIsIdentity) {
  Rng rng(1);
  const Matrix x = standard_normal(rng, 20, 2);
  EXPECT_LE((forward_interaction_step(x, {KernelKind::Quartic}, 0.0) - x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ForwardStep, QuarticPairExample) {
  // Particles at +-1: grad W(2) = (4 - 1) * 2 = 6, averaged over N = 2 partners.
  const Matrix x = (Matrix(2, 1) << 1.0, -1.0).finished();
  const double a = 0.1;
  const Matrix y = forward_interaction_step(x, {KernelKind::Quartic}, a);
  EXPECT_NEAR(y(0, 0), 1.0 - 3.0 * a, 1e-15);
  EXPECT_NEAR(y(1, 0), -1.0 + 3.0 * a, 1e-15);
}

TEST(ForwardStep, PreservesCenterOfMass) {
  Rng rng(2);
  const Matrix x = standard_normal(rng, 200, 2);
  for (KernelKind k : {KernelKind::Quartic, KernelKind::GaussianRepulsion}) {
    const Matrix y = forward_interaction_step(x, {k}, 0.05);
    EXPECT_LE((col_mean(y) - col_mean(x)).norm(), 1e-13);
  }
  const Matrix y = forward_interaction_step(x, {KernelKind::LogRepulsive}, 0.01, true);
  EXPECT_LE((col_mean(y) - col_mean(x)).norm(), 1e-13);
}

TEST(ForwardStep, LogRepulsiveRefusedUnlessAllowed) {
  const Matrix x = (Matrix(2, 1) << 1.0, -1.0).finished();
  EXPECT_THROW(forward_interaction_step(x, {KernelKind::LogRepulsive}, 0.1), InvalidArgument);
  const Matrix same = Matrix::Zero(2, 1);
  EXPECT_THROW(forward_interaction_step(same, {KernelKind::LogRepulsive}, 0.1, true), InvalidArgument);
}

TEST(Kernels, ClosedFormValues) {
  const InteractionKernel g{KernelKind::GaussianRepulsion}, q{KernelKind::Quartic};
  EXPECT_NEAR(g.value(RowVector::Zero(2)), -1.0 / std::numbers::pi, 1e-15);
  for (double d : {0.5, 1.0, 2.0}) {
    const RowVector z = (RowVector(2) << d, 0.0).finished();
    EXPECT_NEAR(q.value(z), std::pow(d, 4) / 4.0 - d * d / 2.0, 1e-14);
  }
  const InteractionKernel l{KernelKind::LogRepulsive};
  EXPECT_NEAR(l.value((RowVector(1) << 2.0).finished()), 2.0 - std::log(2.0), 1e-14);
}

TEST(Kernels, GradientsMatchFiniteDifferences) {
  const RowVector z = (RowVector(2) << 0.7, -0.4).finished();
  for (KernelKind k : {KernelKind::GaussianRepulsion, KernelKind::Quartic, KernelKind::LogRepulsive}) {
    const InteractionKernel w{k};
    const Vector fd = ad::finite_diff_grad([&](const Vector& v) { return w.value(RowVector(v.transpose())); },
                                           Vector(z.transpose()), 1e-6);
    EXPECT_LE((w.gradient(z).transpose() - fd).norm(), 1e-8);
  }
}

TEST(InteractionEnergy, MatchesBruteForceAndGradient) {
  Rng rng(3);
  const Matrix y0 = standard_normal(rng, 7, 2);
  for (KernelKind k : {KernelKind::GaussianRepulsion, KernelKind::Quartic, KernelKind::LogRepulsive}) {
    const InteractionKernel w{k};
    auto brute = [&](const Matrix& y) {
      double s = 0.0;
      for (Index i = 0; i < y.rows(); ++i)
        for (Index j = 0; j < y.rows(); ++j)
          if (i != j) s += w.value(RowVector(y.row(i) - y.row(j)));
      return s / static_cast<double>(y.rows() * (y.rows() - 1));
    };
    Tape t;
    Var yv = t.variable(y0);
    Var e = interaction_energy(yv, w);
    EXPECT_NEAR(e.scalar(), brute(y0), 1e-12);
    t.backward(e);
    const Matrix g = t.grad(yv);
    const Vector flat = Eigen::Map<const Vector>(y0.data(), y0.size());
    const Vector fd = ad::finite_diff_grad(
        [&](const Vector& v) { return brute(Eigen::Map<const Matrix>(v.data(), y0.rows(), y0.cols())); }, flat, 1e-6);
    EXPECT_LE((Eigen::Map<const Vector>(g.data(), g.size()) - fd).norm(), 1e-7);
  }
}

TEST(FlowSpec, ValidationErrors) {
  FlowSpec s = tiny_spec();
  s.scheme = Scheme::FB;
  EXPECT_THROW(validate(s), InvalidArgument);
  s.kernel = InteractionKernel{KernelKind::LogRepulsive};
  try {
    validate(s);
    FAIL() << "expected an exception";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("log_repulsive"), std::string::npos);
  }
  s.scheme = Scheme::Plain;
  EXPECT_THROW(validate(s), InvalidArgument);
  s = tiny_spec();
  s.config.a = -1.0;
  try {
    validate(s);
    FAIL() << "expected an exception";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("jko.a"), std::string::npos);
  }
}

TEST(Flow, Deterministic) {
  const FlowState a = run_flow(tiny_spec()), b = run_flow(tiny_spec());
  EXPECT_TRUE((a.particles.array() == b.particles.array()).all());
  EXPECT_TRUE((sample_flow(a, 2, 10, 4).array() == sample_flow(b, 2, 10, 4).array()).all());
  FlowSpec other = tiny_spec();
  other.config.seed = 10;
  EXPECT_FALSE((run_flow(other).particles.array() == a.particles.array()).all());
}

TEST(Flow, SaveLoadRoundTrip) {
  FlowSpec s = tiny_spec();
  s.scheme = Scheme::FB;
  s.kernel = InteractionKernel{KernelKind::Quartic};
  const FlowState st = run_flow(s);
  const auto dir = std::filesystem::temp_directory_path() / "wgflow_flow_state";
  std::filesystem::remove_all(dir);
  save(st, dir);
  const FlowState back = load(dir);
  EXPECT_EQ(back.steps(), 2);
  EXPECT_EQ(back.records.size(), 4u);
  EXPECT_TRUE((sample_flow(st, 2, 16, 5).array() == sample_flow(back, 2, 16, 5).array()).all());
  EXPECT_THROW(invertible_chain(back, 1), InvalidArgument);
}

TEST(Flow, DensityNeedsConvexMaps) {
  const FlowState st = run_flow(tiny_spec());  // residual maps
  EXPECT_THROW(invertible_chain(st, 1), InvalidArgument);
  EXPECT_NO_THROW(invertible_chain(st, 0));
}
