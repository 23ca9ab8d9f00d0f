#pragma once

// JKO engine: primal-dual training of one proximal step, map chaining for
// sampling P_k, explicit interaction steps (forward-backward scheme) and the
// interaction energy folded into a single JKO step (non-FB scheme).

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "wgflow/analytic.hpp"
#include "wgflow/autodiff.hpp"
#include "wgflow/density.hpp"
#include "wgflow/error.hpp"
#include "wgflow/functionals.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/models.hpp"
#include "wgflow/random.hpp"
#include "wgflow/targets.hpp"

namespace wgflow::flow {

using ad::Tape;
using ad::Var;
using json = nlohmann::json;

/// splitmix64 of (seed, stream): independent per-step generators.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Configuration

enum class MapKind { Residual, Affine, Shift, ICNN };
enum class DualKind { MLP, ExpLinear, ExpQuadratic };
enum class Scheme { Plain, FB, NonFB };

inline std::string to_string(MapKind k) {
  switch (k) {
    case MapKind::Residual: return "residual";
    case MapKind::Affine: return "affine";
    case MapKind::Shift: return "shift";
    case MapKind::ICNN: return "icnn";
  }
  return "?";
}
inline MapKind map_kind_from_string(const std::string& s) {
  if (s == "residual") return MapKind::Residual;
  if (s == "affine") return MapKind::Affine;
  if (s == "shift") return MapKind::Shift;
  if (s == "icnn") return MapKind::ICNN;
  throw InvalidArgument("unknown map architecture '" + s + "' (expected residual, affine, shift or icnn)");
}
inline std::string to_string(DualKind k) {
  switch (k) {
    case DualKind::MLP: return "mlp";
    case DualKind::ExpLinear: return "exp_linear";
    case DualKind::ExpQuadratic: return "exp_quadratic";
  }
  return "?";
}
inline DualKind dual_kind_from_string(const std::string& s) {
  if (s == "mlp") return DualKind::MLP;
  if (s == "exp_linear") return DualKind::ExpLinear;
  if (s == "exp_quadratic") return DualKind::ExpQuadratic;
  throw InvalidArgument("unknown dual architecture '" + s + "' (expected mlp, exp_linear or exp_quadratic)");
}
inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::Plain: return "plain";
    case Scheme::FB: return "fb";
    case Scheme::NonFB: return "nonfb";
  }
  return "?";
}
inline Scheme scheme_from_string(const std::string& s) {
  if (s == "plain") return Scheme::Plain;
  if (s == "fb") return Scheme::FB;
  if (s == "nonfb") return Scheme::NonFB;
  throw InvalidArgument("unknown scheme '" + s + "' (expected plain, fb or nonfb)");
}

struct MapArch {
  MapKind kind = MapKind::Residual;
  std::vector<Index> hidden = {16, 16, 16};
  double strong_convexity = 0.01;  // ICNN only
};

struct DualArch {
  DualKind kind = DualKind::MLP;
  std::vector<Index> hidden = {16, 16};
  std::optional<models::OutputTransform> transform;  // default chosen by the objective
};

struct JKOConfig {
  double a = 0.1;
  int K = 1;
  int J1 = 500;  // outer iterations; 0 skips the proximal step (forward-only runs)
  int J2 = 3;
  int J3 = 1;
  Index M = 256;  // batch size
  double lr_map = 1e-3;
  double lr_dual = 1e-3;
  double lr_final_fraction = 1.0;  // linear learning-rate decay across the outer loop
  std::uint64_t seed = 0;
  bool warm_start = true;
  bool full_batch = false;  // use the whole ensemble as the batch
  Index particles = 10000;  // training ensemble size
  MapArch map;
  DualArch dual;
};

inline void validate(const JKOConfig& c) {
  auto fail = [](const std::string& field, const std::string& rule) {
    throw InvalidArgument("jko." + field + ": " + rule);
  };
  if (!(c.a > 0.0) || !std::isfinite(c.a)) fail("a", "must be a finite positive number");
  if (c.K < 1) fail("K", "must be >= 1");
  if (c.J1 < 0) fail("J1", "must be >= 0");
  if (c.J2 < 1) fail("J2", "must be >= 1");
  if (c.J3 < 1) fail("J3", "must be >= 1");
  if (c.M < 1) fail("M", "must be >= 1");
  if (!(c.lr_map > 0.0)) fail("lr_map", "must be positive");
  if (!(c.lr_dual > 0.0)) fail("lr_dual", "must be positive");
  if (!(c.lr_final_fraction > 0.0 && c.lr_final_fraction <= 1.0)) fail("lr_final_fraction", "must lie in (0, 1]");
  if (c.particles < 2) fail("particles", "must be >= 2");
  if (c.map.kind == MapKind::ICNN && !(c.map.strong_convexity > 0.0)) fail("map.strong_convexity", "must be > 0");
  if ((c.map.kind == MapKind::ICNN || c.map.kind == MapKind::Residual) && c.map.hidden.empty()) {
    fail("map.hidden", "needs at least one layer");
  }
  for (Index h : c.map.hidden)
    if (h < 1) fail("map.hidden", "layer widths must be >= 1");
  for (Index h : c.dual.hidden)
    if (h < 1) fail("dual.hidden", "layer widths must be >= 1");
}

// ---------------------------------------------------------------------------
// Objectives

enum class ObjectiveKind { KL, Entropy, JSD, None };

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::KL: return "kl";
    case ObjectiveKind::Entropy: return "entropy";
    case ObjectiveKind::JSD: return "jsd";
    case ObjectiveKind::None: return "none";
  }
  return "?";
}

/// The functional F(P) = weight * D(P) minimized by each JKO step.
struct Objective {
  ObjectiveKind kind = ObjectiveKind::None;
  std::optional<targets::TargetDensity> target;  // KL
  double m = 2.0;                                // entropy exponent
  double weight = 1.0;
  Matrix data;                                   // JSD: samples of Q
  std::optional<Gaussian> fixed_reference;       // KL: replaces the adaptive Gaussian fit
  bool exact_reference = false;                  // KL: closed-form E_mu[h] (exponential-family duals)
  double box_margin = 0.2;                       // entropy reference box

  static Objective kl(targets::TargetDensity q) {
    Objective o;
    o.kind = ObjectiveKind::KL;
    o.target = std::move(q);
    return o;
  }
  static Objective entropy(double m, double weight = 1.0) {
    if (!(m > 1.0)) throw InvalidArgument("entropy objective: m must exceed 1");
    Objective o;
    o.kind = ObjectiveKind::Entropy;
    o.m = m;
    o.weight = weight;
    return o;
  }
  static Objective jsd(Matrix data) {
    if (data.rows() < 1) throw InvalidArgument("jsd objective: empty data set");
    Objective o;
    o.kind = ObjectiveKind::JSD;
    o.data = std::move(data);
    return o;
  }
  static Objective none() { return {}; }
};

// ---------------------------------------------------------------------------
// Interaction kernels

enum class KernelKind { GaussianRepulsion, Quartic, LogRepulsive };

inline std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::GaussianRepulsion: return "gaussian_repulsion";
    case KernelKind::Quartic: return "quartic";
    case KernelKind::LogRepulsive: return "log_repulsive";
  }
  return "?";
}
inline KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "gaussian_repulsion") return KernelKind::GaussianRepulsion;
  if (s == "quartic") return KernelKind::Quartic;
  if (s == "log_repulsive") return KernelKind::LogRepulsive;
  throw InvalidArgument("unknown kernel '" + s + "' (expected gaussian_repulsion, quartic or log_repulsive)");
}

struct InteractionKernel {
  KernelKind kind = KernelKind::Quartic;

  bool singular_at_zero() const { return kind == KernelKind::LogRepulsive; }

  double value(const double* z, Index n) const {
    double r2 = 0.0;
    for (Index c = 0; c < n; ++c) r2 += z[c] * z[c];
    switch (kind) {
      case KernelKind::GaussianRepulsion: return -std::exp(-r2) / std::numbers::pi;
      case KernelKind::Quartic: return 0.25 * r2 * r2 - 0.5 * r2;
      case KernelKind::LogRepulsive: return 0.5 * r2 - 0.5 * std::log(r2);
    }
    return 0.0;
  }
  /// grad W(z) = factor(|z|^2) * z
  double gradient_factor(double r2) const {
    switch (kind) {
      case KernelKind::GaussianRepulsion: return 2.0 * std::exp(-r2) / std::numbers::pi;
      case KernelKind::Quartic: return r2 - 1.0;
      case KernelKind::LogRepulsive: return 1.0 - 1.0 / r2;
    }
    return 0.0;
  }
  double value(const RowVector& z) const { return value(z.data(), z.size()); }
  RowVector gradient(const RowVector& z) const { return gradient_factor(z.squaredNorm()) * z; }
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_distinct(const double* a, const double* b, Index n, Index i, Index j) {
  for (Index c = 0; c < n; ++c)
    if (a[c] != b[c]) return;
  throw InvalidArgument("log_repulsive kernel: particles " + std::to_string(i) + " and " + std::to_string(j) +
                        " coincide");
}

}  // namespace detail

namespace detail {

inline Matrix drift(const Matrix& particles, const Matrix& frozen, const InteractionKernel& kernel, double a,
                    bool self) {
  if (particles.cols() != frozen.cols()) throw InvalidArgument("forward_interaction_step: dimension mismatch");
  if (frozen.rows() < 1) throw InvalidArgument("forward_interaction_step: empty ensemble");
  if (!(a >= 0.0)) throw InvalidArgument("forward_interaction_step: a must be >= 0");
  const Index n = particles.cols();
  const RowMajor x = particles, y = frozen;
  RowMajor out = x;
  const bool singular = kernel.singular_at_zero();
  // The singular kernel has no self-interaction term, so the average runs over N - 1 partners.
  const double count = static_cast<double>(frozen.rows()) - (singular && self ? 1.0 : 0.0);
  if (!(count > 0.0)) throw InvalidArgument("forward_interaction_step: need at least 2 particles");
  const double scale = a / count;
  std::vector<double> acc(static_cast<std::size_t>(n));
  for (Index i = 0; i < x.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const double* xi = x.data() + i * n;
    for (Index j = 0; j < y.rows(); ++j) {
      if (singular && self && i == j) continue;
      const double* yj = y.data() + j * n;
      if (singular) require_distinct(xi, yj, n, i, j);
      double r2 = 0.0;
      for (Index c = 0; c < n; ++c) r2 += (xi[c] - yj[c]) * (xi[c] - yj[c]);
      const double f = kernel.gradient_factor(r2);
      for (Index c = 0; c < n; ++c) acc[static_cast<std::size_t>(c)] += f * (xi[c] - yj[c]);
    }
    for (Index c = 0; c < n; ++c) out(i, c) -= scale * acc[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace detail

/// x_i <- x_i - a/N sum_j grad W(x_i - y_j) over a frozen ensemble y (the self-term of the
/// smooth kernels vanishes since grad W(0) = 0). The singular log_repulsive kernel is refused
/// unless explicitly allowed.
inline Matrix forward_interaction_step(const Matrix& particles, const Matrix& frozen, const InteractionKernel& kernel,
                                       double a, bool allow_singular = false) {
  if (kernel.singular_at_zero() && !allow_singular) {
    throw InvalidArgument("forward_interaction_step: forward stepping is refused for the log_repulsive kernel "
                          "(use the nonfb scheme)");
  }
  return detail::drift(particles, frozen, kernel, a, false);
}

/// Interaction of an ensemble with itself; under log_repulsive the self-term is excluded and
/// coincident pairs are rejected.
inline Matrix forward_interaction_step(const Matrix& particles, const InteractionKernel& kernel, double a,
                                       bool allow_singular = false) {
  if (kernel.singular_at_zero() && !allow_singular) {
    throw InvalidArgument("forward_interaction_step: forward stepping is refused for the log_repulsive kernel "
                          "(use the nonfb scheme)");
  }
  return detail::drift(particles, particles, kernel, a, true);
}

/// U-statistic 1/(M(M-1)) sum_{i != j} W(y_i - y_j) as a tape node.
inline Var interaction_energy(Var y, const InteractionKernel& kernel) {
  const Index M = y.rows();
  const Index n = y.cols();
  if (M < 2) throw InvalidArgument("nonfb_interaction_value: batch size must be >= 2");
  const detail::RowMajor v = y.value();
  detail::RowMajor grad = detail::RowMajor::Zero(M, n);
  double total = 0.0;
  std::vector<double> diff(static_cast<std::size_t>(n));
  for (Index i = 0; i < M; ++i) {
    const double* yi = v.data() + i * n;
    for (Index j = i + 1; j < M; ++j) {
      const double* yj = v.data() + j * n;
      if (kernel.singular_at_zero()) detail::require_distinct(yi, yj, n, i, j);
      double r2 = 0.0;
      for (Index c = 0; c < n; ++c) {
        diff[static_cast<std::size_t>(c)] = yi[c] - yj[c];
        r2 += diff[static_cast<std::size_t>(c)] * diff[static_cast<std::size_t>(c)];
      }
      total += 2.0 * kernel.value(diff.data(), n);
      const double f = kernel.gradient_factor(r2);
      for (Index c = 0; c < n; ++c) {
        // d/dy_i of W(y_i - y_j) + W(y_j - y_i) = 2 grad W(y_i - y_j)
        grad(i, c) += 2.0 * f * diff[static_cast<std::size_t>(c)];
        grad(j, c) -= 2.0 * f * diff[static_cast<std::size_t>(c)];
      }
    }
  }
  const double norm = 1.0 / (static_cast<double>(M) * static_cast<double>(M - 1));
  Matrix g = Matrix(grad) * norm;
  Tape& t = *y.tape();
  const std::size_t iy = y.id();
  return t.record("interaction_energy", Matrix::Constant(1, 1, total * norm), t.requires_grad(y),
                  [iy, g = std::move(g)](Tape& tp, const Matrix& go) { tp.accumulate(iy, g * go(0, 0)); });
}

template <class Map>
double nonfb_interaction_value(const Map& T, const Matrix& batch, const InteractionKernel& kernel) {
  if (batch.rows() < 2) throw InvalidArgument("nonfb_interaction_value: batch size must be >= 2");
  Tape t;
  return interaction_energy(T.apply(t, t.constant(batch)), kernel).scalar();
}

inline double nonfb_interaction_value(const models::AnyMap& T, const Matrix& batch, const InteractionKernel& kernel) {
  return std::visit([&](const auto& map) { return nonfb_interaction_value(map, batch, kernel); }, T);
}

// ---------------------------------------------------------------------------
// Initial distributions

struct BarenblattP0 {
  analytic::BarenblattSpec spec;
  double t = 0.0;  // profile argument
};

using P0Sampler = std::variant<Gaussian, functionals::UniformBox, BarenblattP0>;

inline Index dim(const P0Sampler& p) {
  if (const auto* g = std::get_if<Gaussian>(&p)) return g->dim();
  if (const auto* b = std::get_if<functionals::UniformBox>(&p)) return b->lower.size();
  return std::get<BarenblattP0>(p).spec.n;
}

inline Matrix sample(const P0Sampler& p, Rng& rng, Index count) {
  if (const auto* g = std::get_if<Gaussian>(&p)) return g->sample(rng, count);
  if (const auto* b = std::get_if<functionals::UniformBox>(&p)) return b->sample(rng, count);
  const auto& b = std::get<BarenblattP0>(p);
  return analytic::barenblatt_sample_1d(b.spec, b.t, rng, count);
}

inline std::function<double(const Vector&)> closed_form_log_density(const P0Sampler& p) {
  if (const auto* g = std::get_if<Gaussian>(&p)) {
    return [g = *g](const Vector& x) { return g.log_density(Matrix(x.transpose()))(0); };
  }
  if (const auto* b = std::get_if<functionals::UniformBox>(&p)) {
    return [b = *b](const Vector& x) {
      for (Index j = 0; j < x.size(); ++j)
        if (x(j) < b.lower(j) || x(j) > b.upper(j)) return -std::numeric_limits<double>::infinity();
      return -std::log(b.volume());
    };
  }
  const auto& b = std::get<BarenblattP0>(p);
  return [b](const Vector& x) { return std::log(analytic::barenblatt_density(b.spec, b.t, x)); };
}

inline json to_json(const P0Sampler& p) {
  auto vec = [](const auto& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  if (const auto* g = std::get_if<Gaussian>(&p)) {
    json cov = json::array();
    for (Index i = 0; i < g->cov.rows(); ++i) cov.push_back(vec(RowVector(g->cov.row(i))));
    return {{"type", "gaussian"}, {"mean", vec(g->mean)}, {"cov", cov}};
  }
  if (const auto* b = std::get_if<functionals::UniformBox>(&p)) {
    return {{"type", "uniform"}, {"lower", vec(b->lower)}, {"upper", vec(b->upper)}};
  }
  const auto& b = std::get<BarenblattP0>(p);
  return {{"type", "barenblatt"}, {"m", b.spec.m}, {"n", b.spec.n}, {"C", b.spec.C},
          {"t0", b.spec.t0},      {"x0", vec(b.spec.x0)}, {"t", b.t}};
}

inline P0Sampler p0_from_json(const json& j) {
  auto vec = [](const json& a) {
    const auto v = a.get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
  };
  const std::string type = j.at("type").get<std::string>();
  if (type == "gaussian") {
    Gaussian g;
    g.mean = vec(j.at("mean"));
    const Index n = g.mean.size();
    g.cov.resize(n, n);
    for (Index i = 0; i < n; ++i) g.cov.row(i) = vec(j.at("cov").at(static_cast<std::size_t>(i))).transpose();
    return g;
  }
  if (type == "uniform") {
    functionals::UniformBox b;
    b.lower = vec(j.at("lower")).transpose();
    b.upper = vec(j.at("upper")).transpose();
    return b;
  }
  if (type == "barenblatt") {
    BarenblattP0 b;
    b.spec.m = j.at("m").get<double>();
    b.spec.n = j.at("n").get<int>();
    b.spec.C = j.at("C").get<double>();
    b.spec.t0 = j.at("t0").get<double>();
    b.spec.x0 = vec(j.at("x0"));
    b.t = j.at("t").get<double>();
    return b;
  }
  throw InvalidArgument("unknown initial distribution type '" + type + "'");
}

// ---------------------------------------------------------------------------
// Step records and flow state

struct TrainedMap {
  models::AnyMap map;
};

struct ForwardDrift {
  Matrix frozen;  // ensemble used for the empirical expectation
  KernelKind kernel = KernelKind::Quartic;
  double a = 0.0;
};

using StepRecord = std::variant<TrainedMap, ForwardDrift>;

inline Matrix apply_record(const StepRecord& r, const Matrix& x) {
  if (const auto* m = std::get_if<TrainedMap>(&r)) return models::apply(m->map, x);
  const auto& d = std::get<ForwardDrift>(r);
  return forward_interaction_step(x, d.frozen, InteractionKernel{d.kernel}, d.a);
}

struct StepLog {
  int step = 0;
  double transport_cost = std::numeric_limits<double>::quiet_NaN();
  double variational_value = std::numeric_limits<double>::quiet_NaN();
  double interaction = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> transport_trace;  // per outer iteration
  std::vector<double> value_trace;
  std::map<std::string, double> metrics;
};

struct FlowState {
  P0Sampler p0;
  Scheme scheme = Scheme::Plain;
  std::vector<StepRecord> records;
  std::vector<std::size_t> round_end;  // records.size() after each JKO round
  std::vector<StepLog> log;
  Matrix particles;  // training ensemble at the last step
  json config;       // free-form run configuration echoed into the manifest

  int steps() const { return static_cast<int>(round_end.size()); }
};

inline Matrix push_forward(const FlowState& s, int k, Matrix x) {
  if (k < 0 || k > s.steps()) {
    throw InvalidArgument("sample_flow: step " + std::to_string(k) + " outside [0, " + std::to_string(s.steps()) + "]");
  }
  const std::size_t end = k == 0 ? 0 : s.round_end[static_cast<std::size_t>(k - 1)];
  for (std::size_t r = 0; r < end; ++r) x = apply_record(s.records[r], x);
  return x;
}

/// Fresh samples of P_k: draws from P0 and replays records of rounds 1..k.
inline Matrix sample_flow(const FlowState& s, int k, Index count, std::uint64_t seed) {
  if (k < 0 || k > s.steps()) {
    throw InvalidArgument("sample_flow: step " + std::to_string(k) + " outside [0, " + std::to_string(s.steps()) + "]");
  }
  if (count < 1) throw InvalidArgument("sample_flow: n_samples must be >= 1");
  Rng rng(seed);
  return push_forward(s, k, sample(s.p0, rng, count));
}

/// Chain of convex-potential maps on a closed-form base, for density evaluation.
inline density::InvertibleChain invertible_chain(const FlowState& s, int k) {
  if (k < 0 || k > s.steps()) throw InvalidArgument("invertible_chain: step out of range");
  if (s.scheme == Scheme::FB) {
    throw InvalidArgument("density evaluation refused: forward-backward chains contain explicit drift steps that "
                          "cannot be pushed backward");
  }
  density::InvertibleChain c;
  c.dim = dim(s.p0);
  c.base_log_density = closed_form_log_density(s.p0);
  const std::size_t end = k == 0 ? 0 : s.round_end[static_cast<std::size_t>(k - 1)];
  for (std::size_t r = 0; r < end; ++r) {
    const auto* m = std::get_if<TrainedMap>(&s.records[r]);
    if (!m) throw InvalidArgument("density evaluation refused: chain contains a forward drift record");
    const auto* phi = std::get_if<models::ConvexPotential>(&m->map);
    if (!phi) {
      throw InvalidArgument("density evaluation requires convex-potential (icnn) maps; step " + std::to_string(r + 1) +
                            " uses '" + models::to_json(m->map).at("type").get<std::string>() + "'");
    }
    c.maps.push_back(*phi);
  }
  return c;
}

// ---------------------------------------------------------------------------
// One JKO step

namespace detail {

inline models::AnyMap make_map(const MapArch& arch, Index n, Rng& rng) {
  switch (arch.kind) {
    case MapKind::Residual: {
      models::ResidualMap::Config c;
      c.dim = n;
      c.hidden = arch.hidden;
      return models::ResidualMap(c, rng);
    }
    case MapKind::Affine: return models::AffineMap(n, false);
    case MapKind::Shift: return models::AffineMap(n, true);
    case MapKind::ICNN: {
      models::ConvexPotential::Config c;
      c.dim = n;
      c.hidden = arch.hidden;
      c.strong_convexity = arch.strong_convexity;
      return models::ConvexPotential(c, rng);
    }
  }
  throw InvalidArgument("unknown map architecture");
}

inline models::OutputTransform default_transform(ObjectiveKind k) {
  return k == ObjectiveKind::JSD ? models::OutputTransform::Sigmoid : models::OutputTransform::Softplus;
}

inline models::AnyDual make_dual(const DualArch& arch, ObjectiveKind obj, Index n, Rng& rng) {
  if (arch.kind == DualKind::MLP) {
    models::DualPotential::Config c;
    c.dim = n;
    c.hidden = arch.hidden;
    c.transform = arch.transform.value_or(default_transform(obj));
    return models::DualPotential(c, rng);
  }
  if (obj == ObjectiveKind::JSD) {
    throw InvalidArgument("jsd objective needs a dual with outputs in (0, 1); use the mlp dual with the sigmoid "
                          "transform");
  }
  return models::ExpQuadraticDual(n, arch.kind == DualKind::ExpQuadratic);
}

template <class D>
Var dual_apply(D& d, Tape& t, Var z, bool trainable) {
  return trainable ? d.apply(t, z) : std::as_const(d).apply(t, z);
}
template <class D>
Var dual_log_apply(D& d, Tape& t, Var z, bool trainable) {
  return trainable ? d.log_apply(t, z) : std::as_const(d).log_apply(t, z);
}

/// Reference measure and objective pieces fixed for the duration of one step.
struct StepContext {
  const Objective* obj = nullptr;
  std::optional<Gaussian> mu;                 // KL
  std::optional<functionals::UniformBox> box;  // entropy
  double omega_scale = 1.0;                   // Omega^{-(m-1)}

  Matrix sample_reference(Rng& rng, Index count) const {
    if (mu) return mu->sample(rng, count);
    if (box) return box->sample(rng, count);
    return gather_rows(obj->data, sample_indices(rng, obj->data.rows(), count));
  }
};

struct Terms {
  Var a;  // mean A(T(x)) (M-row mean)
  Var b;  // mean B(z)
};

inline Terms objective_terms(const StepContext& ctx, models::AnyDual& dual, Tape& t, Var tx, const Matrix& z,
                             bool exact, bool trainable) {
  const Objective& o = *ctx.obj;
  return std::visit(
      [&](auto& h) -> Terms {
        using H = std::decay_t<decltype(h)>;
        Terms r;
        switch (o.kind) {
          case ObjectiveKind::KL: {
            Var log_h = dual_log_apply(h, t, tx, trainable);
            Var val = ad::add(log_h, ad::sub(functionals::gaussian_log_density(tx, *ctx.mu),
                                             functionals::target_log_density(tx, *o.target)));
            r.a = ad::mean(val);
            if constexpr (std::is_same_v<H, models::ExpQuadraticDual>) {
              if (exact) {
                r.b = trainable ? h.gaussian_expectation(t, *ctx.mu)
                                : std::as_const(h).gaussian_expectation(t, *ctx.mu);
                return r;
              }
            }
            r.b = ad::mean(dual_apply(h, t, t.constant(z), trainable));
            return r;
          }
          case ObjectiveKind::Entropy: {
            const double m = o.m;
            Var ht = dual_apply(h, t, tx, trainable);
            Var hz = dual_apply(h, t, t.constant(z), trainable);
            Var pa = m == 2.0 ? ht : ad::pow(ht, m - 1.0);
            Var pb = m == 2.0 ? ad::square(hz) : ad::pow(hz, m);
            r.a = ad::scale(ad::mean(pa), ctx.omega_scale * m / (m - 1.0));
            r.b = ad::scale(ad::mean(pb), ctx.omega_scale);
            return r;
          }
          case ObjectiveKind::JSD: {
            if constexpr (std::is_same_v<H, models::DualPotential>) {
              r.a = ad::mean(trainable ? h.log_complement_apply(t, tx) : std::as_const(h).log_complement_apply(t, tx));
              r.b = ad::neg(ad::mean(dual_log_apply(h, t, t.constant(z), trainable)));
              return r;
            } else {
              throw InvalidArgument("jsd objective requires the mlp dual");
            }
          }
          case ObjectiveKind::None: break;
        }
        throw InvalidArgument("objective has no dual terms");
      },
      dual);
}

/// Reporting offsets turning V into the divergence estimate.
inline double value_offset(ObjectiveKind k) {
  if (k == ObjectiveKind::KL) return 1.0;
  if (k == ObjectiveKind::JSD) return std::log(4.0);
  return 0.0;
}

inline Var transport_term(Var tx, Var x, double a) {
  return ad::scale(ad::mean(ad::sqnorm_rows(ad::sub(tx, x))), 1.0 / (2.0 * a));
}

}  // namespace detail

struct StepResult {
  models::AnyMap map;
  std::optional<models::AnyDual> dual;
  StepLog log;
  Matrix particles;  // T(current ensemble)
};

/// Trains T_k on the ensemble representing P_k. `previous` supplies the warm start (k > 1).
/// `interaction` adds the non-FB interaction energy to the map loss.
inline StepResult jko_step(const Matrix& particles, const Objective& obj, const JKOConfig& cfg, int k,
                           const StepResult* previous = nullptr,
                           const std::optional<InteractionKernel>& interaction = std::nullopt) {
  validate(cfg);
  const Index n = particles.cols();
  if (particles.rows() < 2) throw InvalidArgument("jko_step: need at least 2 particles");
  if (obj.kind == ObjectiveKind::None && !interaction) {
    throw InvalidArgument("jko_step: nothing to minimize (no objective and no interaction energy)");
  }
  if (obj.kind == ObjectiveKind::KL) {
    if (!obj.target) throw InvalidArgument("jko_step: kl objective without a target density");
    if (obj.target->dim() != n) {
      throw InvalidArgument("jko_step: objective/reference mismatch: target dimension " +
                            std::to_string(obj.target->dim()) + " vs particle dimension " + std::to_string(n));
    }
  }
  if (obj.kind == ObjectiveKind::JSD && obj.data.cols() != n) {
    throw InvalidArgument("jko_step: objective/reference mismatch: data dimension " + std::to_string(obj.data.cols()) +
                          " vs particle dimension " + std::to_string(n));
  }
  if (obj.exact_reference && (obj.kind != ObjectiveKind::KL || cfg.dual.kind == DualKind::MLP)) {
    throw InvalidArgument("jko_step: objective/reference mismatch: exact reference expectations need the kl "
                          "objective with an exponential-family dual");
  }
  if (obj.kind == ObjectiveKind::Entropy && cfg.dual.kind == DualKind::MLP) {
    const auto tr = cfg.dual.transform.value_or(models::OutputTransform::Softplus);
    if (tr == models::OutputTransform::Identity) {
      throw InvalidArgument("jko_step: entropy objective needs a nonnegative dual transform");
    }
  }

  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(k)));
  StepResult out;
  const bool warm = cfg.warm_start && previous != nullptr && k > 1;
  out.map = warm ? previous->map : detail::make_map(cfg.map, n, rng);
  if (models::dim(out.map) != n) throw InvalidArgument("jko_step: warm-start map dimension mismatch");
  const bool has_dual = obj.kind != ObjectiveKind::None;
  if (has_dual) {
    out.dual = warm && previous->dual ? *previous->dual : detail::make_dual(cfg.dual, obj.kind, n, rng);
  }

  detail::StepContext ctx;
  ctx.obj = &obj;
  if (obj.kind == ObjectiveKind::KL) {
    if (obj.fixed_reference) {
      if (obj.fixed_reference->dim() != n) throw InvalidArgument("jko_step: objective/reference mismatch: reference dimension");
      ctx.mu = *obj.fixed_reference;
    } else {
      ctx.mu = functionals::fit_reference_gaussian(particles);
    }
  } else if (obj.kind == ObjectiveKind::Entropy) {
    ctx.box = functionals::bounding_box(particles, obj.box_margin);
    ctx.omega_scale = std::pow(ctx.box->volume(), -(obj.m - 1.0));
  }

  const Index M = cfg.full_batch ? particles.rows() : std::min(cfg.M, particles.rows());
  if (interaction && M < 2) throw InvalidArgument("nonfb_interaction_value: batch size must be >= 2");

  auto map_params = models::parameters(out.map);
  ad::Adam map_opt(map_params, {cfg.lr_map, 0.9, 0.999, 1e-8});
  std::optional<ad::Adam> dual_opt;
  std::vector<ad::Parameter*> dual_params;
  if (has_dual) {
    dual_params = models::parameters(*out.dual);
    dual_opt.emplace(dual_params, ad::AdamConfig{cfg.lr_dual, 0.9, 0.999, 1e-8});
  }

  auto nan_guard = [&](int it, const char* phase, auto&& body) {
    try {
      body();
    } catch (const ConvergenceError&) {
      throw;
    } catch (const Error& e) {
      throw ConvergenceError("jko_step " + std::to_string(k) + ": non-finite " + phase + " loss at outer iteration " +
                             std::to_string(it) + " (" + e.what() + ")");
    }
  };

  Matrix x, z;
  for (int it = 0; it < cfg.J1; ++it) {
    const double frac = cfg.J1 > 1 ? static_cast<double>(it) / (cfg.J1 - 1) : 1.0;
    const double decay = 1.0 - (1.0 - cfg.lr_final_fraction) * frac;
    map_opt.state().config.lr = cfg.lr_map * decay;
    if (dual_opt) dual_opt->state().config.lr = cfg.lr_dual * decay;

    x = cfg.full_batch ? particles : gather_rows(particles, sample_indices(rng, particles.rows(), M));
    const bool need_z = has_dual && !obj.exact_reference;
    if (need_z) z = ctx.sample_reference(rng, M);

    double value = std::numeric_limits<double>::quiet_NaN();
    if (has_dual) {
      for (int j = 0; j < cfg.J2; ++j) {
        nan_guard(it, "dual", [&] {
          Tape t;
          Var tx = models::apply(std::as_const(out.map), t, t.constant(x));
          const auto terms = detail::objective_terms(ctx, *out.dual, t, tx, z, obj.exact_reference, true);
          Var v = ad::sub(terms.a, terms.b);
          if (!std::isfinite(v.scalar())) throw Error("value is not finite");
          value = v.scalar() + detail::value_offset(obj.kind);
          dual_opt->zero_grad();
          t.backward(ad::neg(v));
          dual_opt->step();
        });
      }
    }
    double transport = 0.0;
    for (int j = 0; j < cfg.J3; ++j) {
      nan_guard(it, "map", [&] {
        Tape t;
        Var xv = t.constant(x);
        Var tx = models::apply(out.map, t, xv);
        Var tc = detail::transport_term(tx, xv, cfg.a);
        Var loss = tc;
        if (has_dual) {
          const auto terms = detail::objective_terms(ctx, *out.dual, t, tx, z, obj.exact_reference, false);
          loss = ad::add(loss, ad::scale(terms.a, obj.weight));
        }
        if (interaction) loss = ad::add(loss, interaction_energy(tx, *interaction));
        if (!std::isfinite(loss.scalar())) throw Error("loss is not finite");
        transport = tc.scalar();
        map_opt.zero_grad();
        t.backward(loss);
        map_opt.step();
        models::project_constraints(out.map);
      });
    }
    out.log.transport_trace.push_back(transport);
    out.log.value_trace.push_back(value);
  }

  // Step diagnostics at the final parameters.
  out.log.step = k;
  out.particles = models::apply(out.map, particles);
  out.log.transport_cost = (out.particles - particles).rowwise().squaredNorm().mean() / (2.0 * cfg.a);
  if (has_dual) {
    if (x.rows() == 0) {
      x = cfg.full_batch ? particles : gather_rows(particles, sample_indices(rng, particles.rows(), M));
      if (!obj.exact_reference) z = ctx.sample_reference(rng, M);
    }
    Tape t;
    Var tx = models::apply(std::as_const(out.map), t, t.constant(x));
    const auto terms = detail::objective_terms(ctx, *out.dual, t, tx, z, obj.exact_reference, false);
    out.log.variational_value = ad::sub(terms.a, terms.b).scalar() + detail::value_offset(obj.kind);
  }
  if (interaction) {
    const Matrix batch = x.rows() >= 2 ? x : particles;
    out.log.interaction = nonfb_interaction_value(out.map, batch, *interaction);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full runs

struct FlowSpec {
  JKOConfig config;
  Objective objective;
  P0Sampler p0 = Gaussian{};
  std::optional<InteractionKernel> kernel;
  Scheme scheme = Scheme::Plain;
  Index frozen_size = 10000;  // forward-drift ensemble
};

/// Called after each round with the step index and the training ensemble of P_k.
using MetricHook = std::function<void(int k, const Matrix& particles, StepLog& log)>;

inline void validate(const FlowSpec& s) {
  validate(s.config);
  if (s.scheme == Scheme::Plain && s.kernel) {
    throw InvalidArgument("scheme: the plain scheme forbids an interaction kernel");
  }
  if (s.scheme != Scheme::Plain && !s.kernel) {
    throw InvalidArgument("scheme: the " + to_string(s.scheme) + " scheme requires an interaction kernel");
  }
  if (s.scheme == Scheme::FB && s.kernel && s.kernel->singular_at_zero()) {
    throw InvalidArgument("scheme: forward stepping is refused for the log_repulsive kernel (use nonfb)");
  }
  if (s.scheme == Scheme::Plain && s.objective.kind == ObjectiveKind::None) {
    throw InvalidArgument("objective: the plain scheme needs an objective");
  }
  if (s.config.J1 == 0 && s.scheme != Scheme::FB) {
    throw InvalidArgument("jko.J1: 0 outer iterations is only allowed for forward-backward runs");
  }
  if (s.frozen_size < 1) throw InvalidArgument("frozen_size: must be >= 1");
}

inline FlowState run_flow(const FlowSpec& spec, const MetricHook& hook = {}) {
  validate(spec);
  const JKOConfig& cfg = spec.config;
  FlowState state;
  state.p0 = spec.p0;
  state.scheme = spec.scheme;
  {
    Rng rng(derive_seed(cfg.seed, 0x5eedULL << 32));
    state.particles = sample(spec.p0, rng, cfg.particles);
  }
  std::optional<StepResult> prev;
  const std::optional<InteractionKernel> nonfb = spec.scheme == Scheme::NonFB ? spec.kernel : std::nullopt;
  for (int k = 1; k <= cfg.K; ++k) {
    StepLog log;
    log.step = k;
    if (spec.scheme == Scheme::FB) {
      ForwardDrift d;
      d.kernel = spec.kernel->kind;
      d.a = cfg.a;
      if (state.particles.rows() <= spec.frozen_size) {
        d.frozen = state.particles;
      } else {
        Rng rng(derive_seed(cfg.seed, (1ULL << 40) + static_cast<std::uint64_t>(k)));
        d.frozen = gather_rows(state.particles, sample_indices(rng, state.particles.rows(), spec.frozen_size));
      }
      state.particles = forward_interaction_step(state.particles, d.frozen, *spec.kernel, d.a);
      state.records.emplace_back(std::move(d));
    }
    const bool backward = cfg.J1 > 0 && (spec.objective.kind != ObjectiveKind::None || nonfb);
    if (backward) {
      StepResult r = jko_step(state.particles, spec.objective, cfg, k, prev ? &*prev : nullptr, nonfb);
      state.particles = r.particles;
      state.records.emplace_back(TrainedMap{r.map});
      log.transport_cost = r.log.transport_cost;
      log.variational_value = r.log.variational_value;
      log.interaction = r.log.interaction;
      log.transport_trace = r.log.transport_trace;
      log.value_trace = r.log.value_trace;
      prev = std::move(r);
    }
    state.round_end.push_back(state.records.size());
    if (hook) hook(k, state.particles, log);
    state.log.push_back(std::move(log));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Serialization: manifest.json + map_XXX.json + drift_XXX.bin

namespace detail {

inline void write_matrix(const std::filesystem::path& p, const Matrix& m) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  const std::int64_t rows = m.rows(), cols = m.cols();
  f.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  f.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  const RowMajor r = m;
  f.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(sizeof(double) * r.size()));
  if (!f) throw Error("failed writing " + p.string());
}

inline Matrix read_matrix(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read " + p.string());
  std::int64_t rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&rows), sizeof rows);
  f.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!f || rows < 0 || cols < 0 || rows * cols > (std::int64_t{1} << 34)) throw Error("corrupt array file " + p.string());
  RowMajor r(rows, cols);
  f.read(reinterpret_cast<char*>(r.data()), static_cast<std::streamsize>(sizeof(double) * r.size()));
  if (!f) throw Error("truncated array file " + p.string());
  return r;
}

inline std::string numbered(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu%s", stem, i, ext);
  return buf;
}

}  // namespace detail

inline void save(const FlowState& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "wgflow-state";
  manifest["version"] = 1;
  manifest["scheme"] = to_string(s.scheme);
  manifest["p0"] = to_json(s.p0);
  manifest["config"] = s.config;
  manifest["round_end"] = s.round_end;
  json recs = json::array();
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    if (const auto* m = std::get_if<TrainedMap>(&s.records[i])) {
      const std::string file = detail::numbered("map", i + 1, ".json");
      std::ofstream f(dir / file);
      if (!f) throw Error("cannot write " + (dir / file).string());
      f << models::to_json(m->map).dump();
      recs.push_back({{"type", "map"}, {"file", file}});
    } else {
      const auto& d = std::get<ForwardDrift>(s.records[i]);
      const std::string file = detail::numbered("drift", i + 1, ".bin");
      detail::write_matrix(dir / file, d.frozen);
      recs.push_back({{"type", "drift"}, {"file", file}, {"kernel", to_string(d.kernel)}, {"a", d.a}});
    }
  }
  manifest["records"] = recs;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw Error("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << "\n";
}

inline FlowState load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw InvalidArgument("cannot open flow state manifest " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(f);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed flow state manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "wgflow-state") throw InvalidArgument("not a flow state directory: " + dir.string());
  FlowState s;
  s.scheme = scheme_from_string(manifest.at("scheme").get<std::string>());
  s.p0 = p0_from_json(manifest.at("p0"));
  s.config = manifest.value("config", json::object());
  s.round_end = manifest.at("round_end").get<std::vector<std::size_t>>();
  for (const auto& r : manifest.at("records")) {
    const std::string type = r.at("type").get<std::string>();
    const auto path = dir / r.at("file").get<std::string>();
    if (type == "map") {
      std::ifstream mf(path);
      if (!mf) throw InvalidArgument("missing map checkpoint " + path.string());
      s.records.emplace_back(TrainedMap{models::map_from_json(json::parse(mf))});
    } else if (type == "drift") {
      ForwardDrift d;
      d.kernel = kernel_kind_from_string(r.at("kernel").get<std::string>());
      d.a = r.at("a").get<double>();
      d.frozen = detail::read_matrix(path);
      s.records.emplace_back(std::move(d));
    } else {
      throw InvalidArgument("unknown step record type '" + type + "'");
    }
  }
  for (std::size_t i = 0; i < s.round_end.size(); ++i) {
    if (s.round_end[i] > s.records.size() || (i > 0 && s.round_end[i] < s.round_end[i - 1])) {
      throw InvalidArgument("flow state manifest: inconsistent round boundaries");
    }
  }
  return s;
}

}  // namespace wgflow::flow
