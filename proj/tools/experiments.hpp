#pragma once

// Experiment plans built from an INI configuration: parsing and validation
// happen up front (all errors collected), running writes the artifacts.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "wgflow/analytic.hpp"
#include "wgflow/density.hpp"
#include "wgflow/flow.hpp"
#include "wgflow/functionals.hpp"
#include "wgflow/gridref.hpp"
#include "wgflow/metrics.hpp"
#include "wgflow/targets.hpp"

namespace wgflow::cli {

namespace fs = std::filesystem;

inline constexpr const char* version = "0.1.0";

// ---------------------------------------------------------------------------
// CSV helpers ('.' decimal, 17 significant digits)

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s << std::setprecision(17) << v;
  return s.str();
}

inline void write_csv(std::ostream& f, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  for (std::size_t j = 0; j < header.size(); ++j) f << (j ? "," : "") << header[j];
  f << "\n";
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.size(); ++j) f << (j ? "," : "") << format_number(r[j]);
    f << "\n";
  }
}

inline void write_csv(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  write_csv(f, header, rows);
  if (!f) throw Error("failed writing " + path.string());
}

inline std::vector<std::vector<double>> matrix_rows(const Matrix& x) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) rows[static_cast<std::size_t>(i)].push_back(x(i, j));
  return rows;
}

inline void write_points(const fs::path& path, const Matrix& x, const std::string& prefix = "x") {
  std::vector<std::string> header;
  for (Index j = 0; j < x.cols(); ++j) header.push_back(prefix + std::to_string(j + 1));
  write_csv(path, header, matrix_rows(x));
}

/// One point per row; a non-numeric first line is a header.
inline Matrix read_points(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw InvalidArgument("cannot open points file '" + path.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<double> row;
    bool numeric = true;
    for (const auto& tok : split(line, ',')) {
      auto v = parse_double(tok);
      if (!v) {
        numeric = false;
        break;
      }
      row.push_back(*v);
    }
    if (!numeric) {
      if (rows.empty() && lineno == 1) continue;
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": non-numeric entry");
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(rows.front().size()) + " columns");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidArgument("points file '" + path.string() + "' has no rows");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return m;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Shared config blocks

inline Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline std::vector<Index> to_widths(const std::vector<long long>& v) { return {v.begin(), v.end()}; }

inline flow::JKOConfig read_jko(Config& c, std::uint64_t seed, bool need_jko = true) {
  flow::JKOConfig j;
  if (need_jko) {
    if (auto a = c.required_real("jko.a")) j.a = *a;
    if (auto k = c.required_integer("jko.K")) j.K = static_cast<int>(*k);
  }
  j.J1 = static_cast<int>(c.integer("jko.J1", j.J1));
  j.J2 = static_cast<int>(c.integer("jko.J2", j.J2));
  j.J3 = static_cast<int>(c.integer("jko.J3", j.J3));
  j.M = c.integer("jko.M", j.M);
  j.lr_map = c.real("jko.lr_map", j.lr_map);
  j.lr_dual = c.real("jko.lr_dual", j.lr_dual);
  j.lr_final_fraction = c.real("jko.lr_final_fraction", j.lr_final_fraction);
  j.warm_start = c.boolean("jko.warm_start", j.warm_start);
  j.full_batch = c.boolean("jko.full_batch", j.full_batch);
  j.particles = c.integer("jko.particles", j.particles);
  j.seed = seed;
  try {
    j.map.kind = flow::map_kind_from_string(c.str("map.type", "residual"));
  } catch (const InvalidArgument& e) {
    c.error("map.type", e.what());
  }
  const std::vector<long long> map_default =
      j.map.kind == flow::MapKind::ICNN ? std::vector<long long>{16, 16} : std::vector<long long>{16, 16, 16};
  if (j.map.kind == flow::MapKind::Affine || j.map.kind == flow::MapKind::Shift) {
    j.map.hidden.clear();
  } else {
    j.map.hidden = to_widths(c.integers("map.hidden", map_default));
  }
  j.map.strong_convexity = c.real("map.strong_convexity", j.map.strong_convexity);
  try {
    j.dual.kind = flow::dual_kind_from_string(c.str("dual.type", "mlp"));
  } catch (const InvalidArgument& e) {
    c.error("dual.type", e.what());
  }
  if (j.dual.kind == flow::DualKind::MLP) {
    j.dual.hidden = to_widths(c.integers("dual.hidden", {16, 16}));
    if (c.has("dual.transform")) {
      try {
        j.dual.transform = models::output_transform_from_string(c.str("dual.transform", "softplus"));
      } catch (const InvalidArgument& e) {
        c.error("dual.transform", e.what());
      }
    }
  }
  if (need_jko) {
    try {
      flow::validate(j);
    } catch (const InvalidArgument& e) {
      const std::string msg = e.what();
      const auto colon = msg.find(": ");
      c.error(msg.substr(0, colon), msg.substr(colon + 2));
    }
  }
  return j;
}

/// [p0] block: gaussian (mean, cov | std), uniform (lower, upper).
inline std::optional<flow::P0Sampler> read_p0(Config& c, Index dim_hint, const flow::P0Sampler* fallback) {
  if (!c.has_section("p0") && fallback) {
    c.record_default("p0", flow::to_json(*fallback));
    return *fallback;
  }
  const std::string type = c.str("p0.type", "gaussian");
  if (type == "gaussian") {
    Gaussian g;
    std::vector<double> mean = c.reals("p0.mean", std::vector<double>(static_cast<std::size_t>(dim_hint), 0.0));
    g.mean = to_vector(mean);
    const Index n = g.mean.size();
    if (n < 1) {
      c.error("p0.mean", "dimension must be >= 1");
      return std::nullopt;
    }
    if (auto cov = c.matrix("p0.cov")) {
      if (cov->rows() != n || cov->cols() != n) {
        c.error("p0.cov", "must be " + std::to_string(n) + "x" + std::to_string(n));
        return std::nullopt;
      }
      g.cov = *cov;
    } else {
      const double sd = c.real("p0.std", 1.0);
      if (!(sd > 0.0)) c.error("p0.std", "must be positive");
      g.cov = sd * sd * Matrix::Identity(n, n);
    }
    try {
      spd_cholesky(g.cov, "p0 covariance");
    } catch (const InvalidArgument& e) {
      c.error("p0.cov", e.what());
      return std::nullopt;
    }
    return g;
  }
  if (type == "uniform") {
    functionals::UniformBox b;
    const auto lo = c.reals("p0.lower", {});
    const auto hi = c.reals("p0.upper", {});
    if (lo.empty() || lo.size() != hi.size()) {
      c.error("p0.lower", "lower and upper must be non-empty lists of equal length");
      return std::nullopt;
    }
    b.lower = to_vector(lo).transpose();
    b.upper = to_vector(hi).transpose();
    if (((b.upper - b.lower).array() <= 0.0).any()) {
      c.error("p0.upper", "must exceed p0.lower in every coordinate");
      return std::nullopt;
    }
    return b;
  }
  c.error("p0.type", "unknown initial distribution '" + type + "' (expected gaussian or uniform)");
  return std::nullopt;
}

inline std::optional<analytic::GMMSpec> read_gmm(Config& c, const std::string& sec) {
  auto means = c.matrix(sec + ".means");
  if (!means) {
    if (!c.has(sec + ".means")) c.error(sec + ".means", "missing required field");
    return std::nullopt;
  }
  const double sigma = c.real(sec + ".sigma", 0.5);
  if (!(sigma > 0.0)) {
    c.error(sec + ".sigma", "must be positive");
    return std::nullopt;
  }
  std::vector<Vector> mv;
  for (Index i = 0; i < means->rows(); ++i) mv.push_back(means->row(i).transpose());
  analytic::GMMSpec g = analytic::spherical_gmm(mv, sigma);
  if (c.has(sec + ".weights")) {
    const auto w = c.reals(sec + ".weights", {});
    if (w.size() != mv.size()) {
      c.error(sec + ".weights", "needs one weight per component");
      return std::nullopt;
    }
    g.weights = w;
  }
  try {
    analytic::validate(g);
  } catch (const InvalidArgument& e) {
    c.error(sec, e.what());
    return std::nullopt;
  }
  return g;
}

inline std::optional<analytic::OUSpec> read_ou(Config& c, const std::string& sec) {
  auto A = c.matrix(sec + ".A");
  if (!A && !c.has(sec + ".A")) c.error(sec + ".A", "missing required field");
  if (!c.has(sec + ".b")) c.error(sec + ".b", "missing required field");
  const auto b = c.reals(sec + ".b", {});
  if (!A || b.empty()) return std::nullopt;
  analytic::OUSpec s{*A, to_vector(b)};
  try {
    analytic::validate(s);
  } catch (const InvalidArgument& e) {
    c.error(sec + ".A", e.what());
    return std::nullopt;
  }
  return s;
}

struct BayesSetup {
  targets::LogisticPosterior posterior;
  targets::Dataset test;
};

inline std::optional<BayesSetup> read_bayes(Config& c) {
  const std::string source = c.str("bayes.source", "synthetic");
  targets::Dataset data;
  try {
    if (source == "synthetic") {
      const auto count = c.integer("bayes.count", 200);
      const auto w = c.reals("bayes.w_true", {2.0, -1.0});
      const auto seed = c.integer("bayes.data_seed", 11);
      if (count < 4) {
        c.error("bayes.count", "must be >= 4");
        return std::nullopt;
      }
      if (w.empty()) {
        c.error("bayes.w_true", "must be non-empty");
        return std::nullopt;
      }
      data = targets::synthetic_logistic_dataset(count, to_vector(w), static_cast<std::uint64_t>(seed));
    } else if (source == "file") {
      auto path = c.required_str("bayes.path");
      const std::string fmt = c.str("bayes.format", "csv");
      const auto label_column = c.integer("bayes.label_column", -1);
      const bool standardize = c.boolean("bayes.standardize", true);
      if (!path) return std::nullopt;
      data = targets::load_dataset(*path, targets::data_format_from_string(fmt), static_cast<int>(label_column),
                                   standardize);
    } else {
      c.error("bayes.source", "expected synthetic or file, got '" + source + "'");
      return std::nullopt;
    }
  } catch (const InvalidArgument& e) {
    c.error("bayes", e.what());
    return std::nullopt;
  }
  const double ratio = c.real("bayes.train_ratio", 0.8);
  const auto split_seed = c.integer("bayes.split_seed", 3);
  if (!(ratio > 0.0 && ratio < 1.0)) {
    c.error("bayes.train_ratio", "must lie in (0, 1)");
    return std::nullopt;
  }
  auto [tr, te] = targets::split(data, ratio, static_cast<std::uint64_t>(split_seed));
  if (tr.size() < 1 || te.size() < 1) {
    c.error("bayes.train_ratio", "leaves an empty train or test set");
    return std::nullopt;
  }
  BayesSetup s;
  s.posterior.data = std::move(tr);
  s.posterior.prior_shape = c.real("bayes.prior_shape", 1.0);
  s.posterior.prior_rate = c.real("bayes.prior_rate", 0.01);
  if (!(s.posterior.prior_shape > 0.0)) c.error("bayes.prior_shape", "must be positive");
  if (!(s.posterior.prior_rate > 0.0)) c.error("bayes.prior_rate", "must be positive");
  s.test = std::move(te);
  return s;
}

/// Ridge-regularized logistic regression by Newton's method (reporting baseline).
inline Vector logistic_map_fit(const targets::Dataset& d, double ridge = 1e-2) {
  const Index n = d.features.cols();
  Vector w = Vector::Zero(n);
  for (int it = 0; it < 100; ++it) {
    Vector g = -ridge * w;
    Matrix H = ridge * Matrix::Identity(n, n);
    for (Index i = 0; i < d.size(); ++i) {
      const double y = d.labels(i);
      const double t = y * d.features.row(i).dot(w);
      const double s = 1.0 / (1.0 + std::exp(t));  // 1 - sigmoid(t)
      g += y * s * d.features.row(i).transpose();
      H += s * (1.0 - s) * d.features.row(i).transpose() * d.features.row(i);
    }
    const Vector step = H.ldlt().solve(g);
    w += step;
    if (step.norm() < 1e-12) break;
  }
  return w;
}

inline double linear_accuracy(const Vector& w, const targets::Dataset& d) {
  double acc = 0.0;
  for (Index i = 0; i < d.size(); ++i) {
    const double t = d.labels(i) * d.features.row(i).dot(w);
    acc += t > 0.0 ? 1.0 : (t == 0.0 ? 0.5 : 0.0);
  }
  return acc / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Barenblatt helpers (unit-mass normalization)

/// Total mass of the profile at time t (midpoint rule on the support).
inline double barenblatt_mass(const analytic::BarenblattSpec& b, double t) {
  const double r = analytic::barenblatt_support_radius(b, t);
  const int cells = 200000;
  const double h = 2.0 * r / cells;
  double m = 0.0;
  Vector x(1);
  for (int i = 0; i < cells; ++i) {
    x(0) = b.x0(0) - r + (i + 0.5) * h;
    m += analytic::barenblatt_density(b, t, x) * h;
  }
  return m;
}

inline gridref::Grid1D barenblatt_grid(const analytic::BarenblattSpec& b, double t, double lo, double hi, Index d) {
  return gridref::Grid1D::from_function(lo, hi, d, [&](double x) {
    Vector v(1);
    v << x;
    return analytic::barenblatt_density(b, t, v);
  });
}

/// Bin-averages a grid density into `bins` equal bins (d must be divisible by bins).
inline Vector bin_average(const gridref::Grid1D& g, Index bins) {
  const Index per = g.size() / bins;
  Vector out(bins);
  for (Index i = 0; i < bins; ++i) out(i) = g.density.segment(i * per, per).mean();
  return out;
}

inline Vector bin_centers(double lo, double hi, Index bins) {
  Vector c(bins);
  const double w = (hi - lo) / static_cast<double>(bins);
  for (Index i = 0; i < bins; ++i) c(i) = lo + (static_cast<double>(i) + 0.5) * w;
  return c;
}

// ---------------------------------------------------------------------------
// Plans

struct Check {
  std::string metric;
  std::string kind;  // "max" or "min"
  double threshold = 0.0;
};

struct RunContext {
  fs::path out;
  json manifest;
};

struct Plan {
  std::string id;
  std::uint64_t seed = 0;
  std::string output;
  std::vector<Check> checks;
  std::function<json(RunContext&)> run;  // returns the final metric summary
};

namespace detail {

using StepMetrics = std::function<void(int k, const Matrix& particles, std::vector<std::pair<std::string, double>>&)>;

struct FlowPlan {
  flow::FlowSpec spec;
  StepMetrics metrics;
  std::vector<int> snapshots;
  std::function<void(const fs::path&, const flow::FlowState&)> extra_outputs;
  json extra_manifest = json::object();
};

inline json run_flow_plan(FlowPlan& p, RunContext& ctx, const json& resolved) {
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;
  auto record = [&](int k, const flow::StepLog* log, const Matrix& particles) {
    std::vector<std::pair<std::string, double>> m;
    if (p.metrics) p.metrics(k, particles, m);
    if (names.empty()) {
      names = {"step", "transport_cost", "variational_value"};
      if (p.spec.scheme == flow::Scheme::NonFB) names.push_back("interaction");
      for (const auto& kv : m) names.push_back(kv.first);
    }
    std::vector<double> row = {static_cast<double>(k), log ? log->transport_cost : std::nan(""),
                               log ? log->variational_value : std::nan("")};
    if (p.spec.scheme == flow::Scheme::NonFB) row.push_back(log ? log->interaction : std::nan(""));
    for (const auto& kv : m) row.push_back(kv.second);
    rows.push_back(std::move(row));
    if (std::find(p.snapshots.begin(), p.snapshots.end(), k) != p.snapshots.end()) {
      write_points(ctx.out / ("samples_" + std::to_string(k) + ".csv"), particles);
    }
  };
  // Step 0 uses the same initial ensemble as the flow.
  {
    Rng rng(flow::derive_seed(p.spec.config.seed, 0x5eedULL << 32));
    record(0, nullptr, flow::sample(p.spec.p0, rng, p.spec.config.particles));
  }
  flow::FlowState state = flow::run_flow(p.spec, [&](int k, const Matrix& particles, flow::StepLog& log) {
    record(k, &log, particles);
    std::cerr << "step " << k << "/" << p.spec.config.K << "\n";
  });
  state.config = resolved;
  write_csv(ctx.out / "metrics.csv", names, rows);
  flow::save(state, ctx.out / "state");
  if (p.extra_outputs) p.extra_outputs(ctx.out, state);
  json summary = json::object();
  for (std::size_t j = 1; j < names.size(); ++j) summary[names[j]] = rows.back()[j];
  for (auto& [k, v] : p.extra_manifest.items()) ctx.manifest[k] = v;
  return summary;
}

inline std::vector<int> read_snapshots(Config& c, int K) {
  const auto s = c.integers("experiment.snapshots", {0, K});
  std::vector<int> out;
  for (long long v : s) {
    if (v < 0 || v > K) c.error("experiment.snapshots", "step " + std::to_string(v) + " outside [0, K]");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace detail

inline std::vector<Check> read_checks(Config& c) {
  std::vector<Check> out;
  for (const std::string key : {"symkl", "jko_mean_error", "restricted_kl", "restricted_kl_error", "ksd_ratio",
                                "l1_grid", "l1_barenblatt", "second_moment_error", "max_radius", "ring_deviation",
                                "max_abs_coordinate", "accuracy_gap", "abs_error"}) {
    for (const std::string kind : {"max", "min"}) {
      const std::string path = "checks." + key + "_" + kind;
      if (c.has(path)) out.push_back({key, kind, c.real(path, 0.0)});
    }
  }
  return out;
}

// --- ou -------------------------------------------------------------------

inline void build_ou(Config& c, Plan& plan) {
  auto ou = read_ou(c, "ou");
  const auto jko = read_jko(c, plan.seed);
  const Index n = ou ? ou->b.size() : 2;
  flow::P0Sampler def = standard_gaussian(n);
  auto p0 = read_p0(c, n, &def);
  const bool exact = c.boolean("reference.exact", false);
  const bool restricted = c.boolean("metrics.restricted_kl", false);
  const auto restricted_iters = c.integer("metrics.restricted_iterations", 3000);
  const auto snapshots = detail::read_snapshots(c, jko.K);
  if (!ou || !p0) return;
  if (flow::dim(*p0) != n) c.error("p0", "dimension must match ou.b");
  if (exact && jko.dual.kind == flow::DualKind::MLP) {
    c.error("reference.exact", "exact reference expectations need dual.type = exp_linear or exp_quadratic");
  }
  auto fp = std::make_shared<detail::FlowPlan>();
  fp->spec.config = jko;
  fp->spec.p0 = *p0;
  fp->spec.objective = flow::Objective::kl(targets::ou_target(*ou));
  fp->spec.objective.exact_reference = exact;
  fp->snapshots = snapshots;
  const analytic::OUSpec spec = *ou;
  const bool identity_drift = (ou->A - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() == 0.0;
  std::optional<Gaussian> g0;
  if (const auto* g = std::get_if<Gaussian>(&*p0)) g0 = *g;
  const bool standard_start =
      g0 && g0->mean.isZero(0.0) && (g0->cov - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() == 0.0;
  const double a = jko.a;
  const int K = jko.K;
  const std::uint64_t seed = plan.seed;
  fp->metrics = [=](int k, const Matrix& x, std::vector<std::pair<std::string, double>>& m) {
    const Gaussian fit = empirical_gaussian(x);
    // Analytic law at time t = k a, started from P0 (Gaussian start only).
    if (g0) {
      const Gaussian law = analytic::ou_moments(spec, a * k);
      Gaussian pt;
      const double t = a * k;
      const Matrix e = symmetric_matrix_function(spec.A, [t](double l) { return std::exp(-l * t); });
      pt.mean = e * g0->mean + law.mean;
      pt.cov = law.cov + e * (g0->cov - Matrix::Identity(n, n)) * e.transpose();
      m.emplace_back("symkl", metrics::symkl(fit, pt));
    }
    if (identity_drift && standard_start) {
      m.emplace_back("jko_mean_error", (fit.mean - analytic::gaussian_jko_mean(spec.b, a, k)).norm());
    }
    if (restricted && k == K) {
      functionals::RestrictedOptions opt;
      opt.iterations = static_cast<int>(restricted_iters);
      opt.seed = seed;
      const Gaussian q{spec.b, spec.A.inverse()};
      const auto r = functionals::restricted_divergence(functionals::FDivergenceSpec::kl(), x, q,
                                                        functionals::FunctionClass::Quadratic, opt);
      m.emplace_back("restricted_kl", r.value);
      if (identity_drift && standard_start) {
        const Vector ek = analytic::gaussian_jko_mean(spec.b, a, k);
        m.emplace_back("restricted_kl_error", std::abs(r.value - 0.5 * (ek - spec.b).squaredNorm()));
      }
    } else if (restricted) {
      m.emplace_back("restricted_kl", std::nan(""));
      if (identity_drift && standard_start) m.emplace_back("restricted_kl_error", std::nan(""));
    }
  };
  plan.run = [fp, &c](RunContext& ctx) { return detail::run_flow_plan(*fp, ctx, c.resolved()); };
}

// --- gmm-sample -------------------------------------------------------------

inline void build_gmm(Config& c, Plan& plan) {
  auto gmm = read_gmm(c, "gmm");
  const auto jko = read_jko(c, plan.seed);
  const Index n = gmm ? gmm->dim() : 2;
  flow::P0Sampler def = Gaussian{Vector::Zero(n), 4.0 * Matrix::Identity(n, n)};
  auto p0 = read_p0(c, n, &def);
  const std::string objective = c.str("objective.type", "kl");
  const auto data_size = c.integer("objective.data_size", 10000);
  const auto ksd_samples = c.integer("metrics.ksd_samples", 1000);
  const double bandwidth = c.real("metrics.ksd_bandwidth", 0.0);
  const auto snapshots = detail::read_snapshots(c, jko.K);
  if (ksd_samples < 2) c.error("metrics.ksd_samples", "must be >= 2");
  if (objective != "kl" && objective != "jsd") c.error("objective.type", "expected kl or jsd");
  if (!gmm || !p0) return;
  if (flow::dim(*p0) != n) c.error("p0", "dimension must match the mixture");
  auto fp = std::make_shared<detail::FlowPlan>();
  fp->spec.config = jko;
  fp->spec.p0 = *p0;
  const targets::TargetDensity q = targets::gmm_target(*gmm);
  if (objective == "kl") {
    fp->spec.objective = flow::Objective::kl(q);
  } else {
    fp->spec.objective = flow::Objective::jsd(analytic::gmm_sample(*gmm, data_size, flow::derive_seed(plan.seed, 77)));
  }
  fp->snapshots = snapshots;
  const Index ns = ksd_samples;
  auto ksd = [q, ns, bandwidth](const Matrix& x) {
    const Matrix head = x.topRows(std::min(ns, x.rows()));
    return metrics::ksd(head, q.score(head), {bandwidth});
  };
  const analytic::GMMSpec g = *gmm;
  const auto p0v = *p0;
  const std::uint64_t seed = plan.seed;
  auto ksd0 = std::make_shared<double>(std::nan(""));
  fp->metrics = [=](int k, const Matrix& x, std::vector<std::pair<std::string, double>>& m) {
    const double v = ksd(x);
    if (k == 0) *ksd0 = v;
    m.emplace_back("ksd", v);
    m.emplace_back("ksd_ratio", v / *ksd0);
  };
  {
    const Matrix exact = analytic::gmm_sample(g, ns, flow::derive_seed(seed, 99));
    fp->extra_manifest["ksd_exact_samples"] = ksd(exact);
  }
  plan.run = [fp, &c](RunContext& ctx) { return detail::run_flow_plan(*fp, ctx, c.resolved()); };
}

// --- porous -----------------------------------------------------------------

inline void build_porous(Config& c, Plan& plan) {
  auto jko = read_jko(c, plan.seed);
  analytic::BarenblattSpec b;
  b.m = c.real("porous.m", 2.0);
  b.C = c.real("porous.C", std::cbrt(3.0 / 16.0));
  b.t0 = c.real("porous.t0", 0.002);
  const bool rescale = c.boolean("porous.mass_rescale", true);
  const auto cells = c.integer("porous.cells", 300);
  const double factor = c.real("porous.domain_factor", 1.5);
  const auto bins = c.integer("porous.bins", 30);
  const double tol = c.real("porous.grid_tol", 1e-10);
  const double margin = c.real("reference.margin", 0.2);
  const auto snapshots = detail::read_snapshots(c, jko.K);
  if (!(b.m > 1.0)) c.error("porous.m", "m must exceed 1");
  if (!(b.C > 0.0)) c.error("porous.C", "must be positive");
  if (!(b.t0 > 0.0)) c.error("porous.t0", "must be positive");
  if (cells < 2) c.error("porous.cells", "must be >= 2");
  if (bins < 1 || cells % std::max<long long>(bins, 1) != 0) c.error("porous.bins", "must divide porous.cells");
  if (!(factor >= 1.0)) c.error("porous.domain_factor", "must be >= 1");
  if (!(tol > 0.0)) c.error("porous.grid_tol", "must be positive");
  if (!c.errors().empty()) return;

  // The profile's mass M enters the unit-mass flow as a time rescaling by M^(m-1).
  const double mass = barenblatt_mass(b, 0.0);
  const double a_phys = jko.a;
  const double a_eff = rescale ? a_phys * std::pow(mass, b.m - 1.0) : a_phys;
  jko.a = a_eff;
  const int K = jko.K;
  const double L = factor * analytic::barenblatt_support_radius(b, a_phys * K);
  auto fp = std::make_shared<detail::FlowPlan>();
  fp->spec.config = jko;
  fp->spec.p0 = flow::BarenblattP0{b, 0.0};
  fp->spec.objective = flow::Objective::entropy(b.m);
  fp->spec.objective.box_margin = margin;
  fp->snapshots = snapshots;
  fp->extra_manifest["barenblatt_mass"] = mass;
  fp->extra_manifest["effective_step"] = a_eff;
  fp->extra_manifest["domain"] = {-L, L};
  auto grid = std::make_shared<gridref::RunResult>();
  const Index d = cells, nb = bins;
  fp->metrics = [=](int k, const Matrix& x, std::vector<std::pair<std::string, double>>& m) {
    if (grid->densities.empty()) {
      const auto g0 = barenblatt_grid(b, 0.0, -L, L, d);
      gridref::StepOptions opt;
      opt.tol = tol;
      *grid = gridref::grid_run(g0, a_eff, b.m, K, opt);
    }
    const auto& gk = grid->densities[static_cast<std::size_t>(k)];
    const auto exact = barenblatt_grid(b, a_phys * k, -L, L, d);
    const Vector centers = bin_centers(-L, L, nb);
    const Vector h = metrics::hist1d(x.col(0), centers);
    const double w = 2.0 * L / static_cast<double>(nb);
    m.emplace_back("l1_grid", w * (h - bin_average(gk, nb)).cwiseAbs().sum());
    m.emplace_back("l1_barenblatt", gridref::l1_grid_distance(gk, exact));
    m.emplace_back("entropy_grid", grid->entropy[static_cast<std::size_t>(k)]);
  };
  fp->extra_outputs = [=](const fs::path& out, const flow::FlowState&) {
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < grid->densities.size(); ++k) {
      const auto& g = grid->densities[k];
      for (Index i = 0; i < g.size(); ++i) rows.push_back({static_cast<double>(k), g.node(i), g.density(i)});
    }
    write_csv(out / "grid.csv", {"step", "node", "density"}, rows);
  };
  plan.run = [fp, &c](RunContext& ctx) { return detail::run_flow_plan(*fp, ctx, c.resolved()); };
}

// --- aggregate --------------------------------------------------------------

inline void build_aggregate(Config& c, Plan& plan) {
  const auto jko = read_jko(c, plan.seed);
  std::optional<flow::InteractionKernel> kernel;
  if (auto k = c.required_str("interaction.kernel")) {
    try {
      kernel = flow::InteractionKernel{flow::kernel_kind_from_string(*k)};
    } catch (const InvalidArgument& e) {
      c.error("interaction.kernel", e.what());
    }
  }
  flow::Scheme scheme = flow::Scheme::FB;
  try {
    scheme = flow::scheme_from_string(c.str("interaction.scheme", "fb"));
  } catch (const InvalidArgument& e) {
    c.error("interaction.scheme", e.what());
  }
  const double weight = c.real("diffusion.weight", 0.0);
  const double m = c.real("diffusion.m", 2.0);
  const auto frozen = c.integer("interaction.frozen_size", 10000);
  const double margin = c.real("reference.margin", 0.2);
  const Index dim = c.integer("p0.dim", 2);
  auto p0 = read_p0(c, dim, nullptr);
  const bool ring = c.has("metrics.ring_radius");
  const double ring_radius = c.real("metrics.ring_radius", 0.5);
  const bool moment = c.has("metrics.second_moment_target");
  const double moment_target = c.real("metrics.second_moment_target", 0.5);
  const auto snapshots = detail::read_snapshots(c, jko.K);
  if (weight < 0.0) c.error("diffusion.weight", "must be >= 0");
  if (weight > 0.0 && !(m > 1.0)) c.error("diffusion.m", "m must exceed 1");
  if (frozen < 1) c.error("interaction.frozen_size", "must be >= 1");
  if (!kernel || !p0) return;
  auto fp = std::make_shared<detail::FlowPlan>();
  fp->spec.config = jko;
  fp->spec.p0 = *p0;
  fp->spec.kernel = kernel;
  fp->spec.scheme = scheme;
  fp->spec.frozen_size = frozen;
  if (weight > 0.0) {
    fp->spec.objective = flow::Objective::entropy(m, weight);
    fp->spec.objective.box_margin = margin;
  }
  try {
    flow::validate(fp->spec);
  } catch (const InvalidArgument& e) {
    c.error("interaction.scheme", e.what());
    return;
  }
  fp->snapshots = snapshots;
  fp->metrics = [=](int, const Matrix& x, std::vector<std::pair<std::string, double>>& out) {
    const RowVector mean = x.colwise().mean();
    const double m2 = x.rowwise().squaredNorm().mean();
    const Vector r = x.rowwise().norm();
    out.emplace_back("second_moment", m2);
    if (moment) out.emplace_back("second_moment_error", std::abs(m2 - moment_target));
    out.emplace_back("mean_norm", mean.norm());
    out.emplace_back("mean_radius", r.mean());
    out.emplace_back("max_radius", r.maxCoeff());
    out.emplace_back("max_abs_coordinate", x.cwiseAbs().maxCoeff());
    if (ring) out.emplace_back("ring_deviation", (r.array() - ring_radius).abs().mean());
  };
  plan.run = [fp, &c](RunContext& ctx) { return detail::run_flow_plan(*fp, ctx, c.resolved()); };
}

// --- bayes ------------------------------------------------------------------

inline void build_bayes(Config& c, Plan& plan) {
  const auto jko = read_jko(c, plan.seed);
  auto setup = read_bayes(c);
  const auto snapshots = detail::read_snapshots(c, jko.K);
  if (!setup) return;
  const Index n = setup->posterior.dim();
  flow::P0Sampler def = standard_gaussian(n);
  auto p0 = read_p0(c, n, &def);
  if (!p0) return;
  if (flow::dim(*p0) != n) c.error("p0", "dimension must equal the feature count + 1");
  auto fp = std::make_shared<detail::FlowPlan>();
  fp->spec.config = jko;
  fp->spec.p0 = *p0;
  fp->spec.objective = flow::Objective::kl(targets::logistic_target(setup->posterior));
  fp->snapshots = snapshots;
  const Vector w_map = logistic_map_fit(setup->posterior.data);
  const double map_acc = linear_accuracy(w_map, setup->test);
  fp->extra_manifest["map_accuracy"] = map_acc;
  const targets::Dataset test = setup->test;
  fp->metrics = [=](int, const Matrix& x, std::vector<std::pair<std::string, double>>& m) {
    const auto r = targets::predictive_eval(x, test);
    m.emplace_back("accuracy", r.accuracy);
    m.emplace_back("log_likelihood", r.log_likelihood);
    m.emplace_back("accuracy_gap", map_acc - r.accuracy);
  };
  plan.run = [fp, &c](RunContext& ctx) { return detail::run_flow_plan(*fp, ctx, c.resolved()); };
}

// --- grid-ref ---------------------------------------------------------------

struct GridRefOptions {
  double m = 2.0;
  double a = 0.001;
  int steps = 8;
  Index d = 300;
  std::optional<std::pair<double, double>> domain;
  std::string init = "barenblatt";
  std::string init_file;
  analytic::BarenblattSpec barenblatt;
  bool mass_rescale = false;
  double tol = 1e-10;
};

struct GridRefResult {
  gridref::RunResult run;
  std::vector<std::vector<double>> metrics;  // step, entropy, l1_barenblatt, sweeps, kkt_gap
};

inline GridRefResult run_grid_ref(const GridRefOptions& o) {
  analytic::BarenblattSpec b = o.barenblatt;
  b.m = o.m;
  const double mass = o.init == "barenblatt" ? barenblatt_mass(b, 0.0) : 1.0;
  const double a_eff = o.mass_rescale ? o.a * std::pow(mass, o.m - 1.0) : o.a;
  double lo, hi;
  if (o.domain) {
    std::tie(lo, hi) = *o.domain;
  } else if (o.init == "barenblatt") {
    const double L = 1.5 * analytic::barenblatt_support_radius(b, o.a * o.steps);
    lo = b.x0(0) - L;
    hi = b.x0(0) + L;
  } else {
    throw InvalidArgument("grid-ref: --domain is required unless --init barenblatt");
  }
  gridref::Grid1D g0;
  if (o.init == "barenblatt") {
    g0 = barenblatt_grid(b, 0.0, lo, hi, o.d);
  } else if (o.init == "uniform") {
    const double c0 = lo + 0.25 * (hi - lo), c1 = hi - 0.25 * (hi - lo);
    g0 = gridref::Grid1D::from_function(lo, hi, o.d, [&](double x) { return x >= c0 && x <= c1 ? 1.0 : 0.0; });
  } else if (o.init == "file") {
    const Matrix vals = read_points(o.init_file);
    if (vals.cols() != 1 || vals.rows() != o.d) {
      throw InvalidArgument("grid-ref: init file must hold one density value per cell (" + std::to_string(o.d) + ")");
    }
    if ((vals.array() < 0.0).any()) throw InvalidArgument("grid-ref: init density must be nonnegative");
    g0.lower = lo;
    g0.dx = (hi - lo) / static_cast<double>(o.d);
    g0.density = vals.col(0);
    if (!(g0.mass() > 0.0)) throw InvalidArgument("grid-ref: init density has zero mass");
    g0.density /= g0.mass();
  } else {
    throw InvalidArgument("grid-ref: unknown init '" + o.init + "' (expected barenblatt, uniform or file)");
  }
  gridref::StepOptions opt;
  opt.tol = o.tol;
  GridRefResult r;
  r.run = gridref::grid_run(g0, a_eff, o.m, o.steps, opt);
  for (int k = 0; k <= o.steps; ++k) {
    double l1 = std::nan("");
    if (o.init == "barenblatt") {
      l1 = gridref::l1_grid_distance(r.run.densities[static_cast<std::size_t>(k)],
                                     barenblatt_grid(b, o.a * k, lo, hi, o.d));
    }
    const auto* rep = k > 0 ? &r.run.reports[static_cast<std::size_t>(k - 1)] : nullptr;
    r.metrics.push_back({static_cast<double>(k), r.run.entropy[static_cast<std::size_t>(k)], l1,
                         rep ? static_cast<double>(rep->sweeps) : 0.0, rep ? rep->gap : 0.0});
  }
  return r;
}

template <class Sink>
inline void write_grid_ref(Sink&& sink, const GridRefResult& r) {
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < r.run.densities.size(); ++k) {
    const auto& g = r.run.densities[k];
    for (Index i = 0; i < g.size(); ++i) rows.push_back({static_cast<double>(k), g.node(i), g.density(i)});
  }
  write_csv(sink, {"step", "node", "density"}, rows);
}

inline void build_grid_ref(Config& c, Plan& plan) {
  GridRefOptions o;
  o.m = c.real("grid.m", 2.0);
  if (auto a = c.required_real("grid.a")) o.a = *a;
  o.steps = static_cast<int>(c.integer("grid.steps", 8));
  o.d = c.integer("grid.cells", 300);
  if (c.has("grid.domain")) {
    const auto dom = c.reals("grid.domain", {});
    if (dom.size() != 2 || !(dom[1] > dom[0])) c.error("grid.domain", "expected lo,hi with lo < hi");
    else o.domain = std::make_pair(dom[0], dom[1]);
  }
  o.init = c.str("grid.init", "barenblatt");
  if (o.init == "file") {
    if (auto f = c.required_str("grid.init_file")) o.init_file = *f;
  }
  o.barenblatt.C = c.real("grid.C", std::cbrt(3.0 / 16.0));
  o.barenblatt.t0 = c.real("grid.t0", 0.002);
  o.mass_rescale = c.boolean("grid.mass_rescale", true);
  o.tol = c.real("grid.tol", 1e-10);
  if (!(o.m > 1.0)) c.error("grid.m", "m must exceed 1");
  if (!(o.a > 0.0)) c.error("grid.a", "must be positive");
  if (o.steps < 0) c.error("grid.steps", "must be >= 0");
  if (o.d < 2) c.error("grid.cells", "must be >= 2");
  if (o.init != "barenblatt" && o.init != "uniform" && o.init != "file") {
    c.error("grid.init", "expected barenblatt, uniform or file");
  }
  if (o.init != "barenblatt" && !o.domain) c.error("grid.domain", "required unless grid.init = barenblatt");
  if (!(o.tol > 0.0)) c.error("grid.tol", "must be positive");
  plan.run = [o](RunContext& ctx) {
    const auto r = run_grid_ref(o);
    write_grid_ref(ctx.out / "grid.csv", r);
    write_csv(ctx.out / "metrics.csv", {"step", "entropy", "l1_barenblatt", "sweeps", "kkt_gap"}, r.metrics);
    json s;
    s["entropy"] = r.metrics.back()[1];
    s["l1_barenblatt"] = r.metrics.back()[2];
    return s;
  };
}

// --- density-eval -------------------------------------------------------------

inline Matrix eval_density(const fs::path& state_dir, const Matrix& points, int step = -1) {
  const flow::FlowState s = flow::load(state_dir);
  const int k = step < 0 ? s.steps() : step;
  const auto chain = flow::invertible_chain(s, k);
  if (points.cols() != chain.dim) {
    throw InvalidArgument("eval-density: points have " + std::to_string(points.cols()) + " columns, flow dimension is " +
                          std::to_string(chain.dim));
  }
  const Vector l = density::log_density(chain, points);
  Matrix out(points.rows(), points.cols() + 1);
  out << points, l;
  return out;
}

template <class Sink>
inline void write_density(Sink&& sink, const Matrix& out) {
  std::vector<std::string> header;
  for (Index j = 0; j + 1 < out.cols(); ++j) header.push_back("x" + std::to_string(j + 1));
  header.push_back("log_density");
  write_csv(sink, header, matrix_rows(out));
}

inline void build_density_eval(Config& c, Plan& plan) {
  auto state = c.required_str("density.state");
  auto points = c.required_str("density.points");
  const auto step = c.integer("density.step", -1);
  if (!state || !points) return;
  plan.run = [s = *state, p = *points, step](RunContext& ctx) {
    const Matrix out = eval_density(s, read_points(p), static_cast<int>(step));
    write_density(ctx.out / "log_density.csv", out);
    json summary;
    summary["points"] = out.rows();
    return summary;
  };
}

// --- divergence-bench -----------------------------------------------------------

inline void build_divergence(Config& c, Plan& plan) {
  const std::string f = c.str("divergence.f", "kl");
  const double m = c.real("divergence.m", 2.0);
  const std::string cls = c.str("divergence.class", "quadratic");
  const auto p_mean = c.reals("divergence.p_mean", {1.0, 0.0});
  const auto q_mean = c.reals("divergence.q_mean", {0.0, 0.0});
  const double p_std = c.real("divergence.p_std", 1.0);
  const double q_std = c.real("divergence.q_std", 1.0);
  const auto samples = c.integer("divergence.samples", 10000);
  const bool exact_q = c.boolean("divergence.exact_q", true);
  functionals::RestrictedOptions opt;
  opt.iterations = static_cast<int>(c.integer("divergence.iterations", opt.iterations));
  opt.lr = c.real("divergence.lr", opt.lr);
  opt.seed = plan.seed;
  opt.hidden = to_widths(c.integers("divergence.hidden", {16, 16}));
  std::optional<functionals::FDivergenceSpec> spec;
  try {
    if (f == "kl") spec = functionals::FDivergenceSpec::kl();
    else if (f == "jsd") spec = functionals::FDivergenceSpec::jsd();
    else if (f == "pearson") spec = functionals::FDivergenceSpec::pearson();
    else if (f == "entropy") spec = functionals::FDivergenceSpec::entropy(m);
    else c.error("divergence.f", "expected kl, jsd, pearson or entropy");
  } catch (const InvalidArgument& e) {
    c.error("divergence.m", e.what());
  }
  std::optional<functionals::FunctionClass> fc;
  try {
    fc = functionals::function_class_from_string(cls);
  } catch (const InvalidArgument& e) {
    c.error("divergence.class", e.what());
  }
  if (p_mean.size() != q_mean.size() || p_mean.empty()) c.error("divergence.q_mean", "must match p_mean in length");
  if (!(p_std > 0.0)) c.error("divergence.p_std", "must be positive");
  if (!(q_std > 0.0)) c.error("divergence.q_std", "must be positive");
  if (samples < 2) c.error("divergence.samples", "must be >= 2");
  if (opt.iterations < 1) c.error("divergence.iterations", "must be >= 1");
  if (exact_q && spec && fc && (spec->kind != functionals::FDivKind::KL || *fc == functionals::FunctionClass::Network)) {
    c.error("divergence.exact_q", "exact Q expectations need f = kl and an affine or quadratic class");
  }
  if (!spec || !fc || !c.errors().empty()) return;
  const Index n = static_cast<Index>(p_mean.size());
  const Gaussian P{to_vector(p_mean), p_std * p_std * Matrix::Identity(n, n)};
  const Gaussian Q{to_vector(q_mean), q_std * q_std * Matrix::Identity(n, n)};
  const auto fs_ = *spec;
  const auto cl = *fc;
  const std::uint64_t seed = plan.seed;
  plan.run = [=](RunContext& ctx) {
    Rng rng(seed);
    const Matrix xp = P.sample(rng, samples);
    functionals::QSource qs;
    if (exact_q) qs = Q;
    else qs = Q.sample(rng, samples);
    const auto r = functionals::restricted_divergence(fs_, xp, qs, cl, opt, P);
    json out;
    out["value"] = r.value;
    out["class"] = functionals::to_string(r.cls);
    out["budget"] = r.iterations;
    out["seed"] = seed;
    out["params"] = r.params;
    if (r.population_value) out["population_value"] = *r.population_value;
    if (fs_.kind == functionals::FDivKind::KL) {
      out["exact"] = functionals::exact_gaussian_kl(P, Q);
      out["abs_error"] = std::abs(r.value - functionals::exact_gaussian_kl(P, Q));
    }
    write_json(ctx.out / "result.json", out);
    json summary;
    summary["value"] = r.value;
    if (out.contains("abs_error")) summary["abs_error"] = out["abs_error"];
    return summary;
  };
}

// ---------------------------------------------------------------------------

inline Plan build_plan(Config& c, std::optional<std::uint64_t> seed_override) {
  Plan plan;
  const auto id = c.required_str("experiment.id");
  const auto seed = c.integer("experiment.seed", 0);
  if (seed < 0) c.error("experiment.seed", "must be >= 0");
  plan.seed = seed_override ? *seed_override : static_cast<std::uint64_t>(seed);
  if (seed_override) c.str("experiment.seed_override", std::to_string(*seed_override));
  plan.checks = read_checks(c);
  if (!id) return plan;
  plan.id = *id;
  plan.output = c.str("experiment.output", "out/" + plan.id);
  if (plan.id == "ou") build_ou(c, plan);
  else if (plan.id == "gmm-sample") build_gmm(c, plan);
  else if (plan.id == "porous") build_porous(c, plan);
  else if (plan.id == "aggregate") build_aggregate(c, plan);
  else if (plan.id == "bayes") build_bayes(c, plan);
  else if (plan.id == "grid-ref") build_grid_ref(c, plan);
  else if (plan.id == "density-eval") build_density_eval(c, plan);
  else if (plan.id == "divergence-bench") build_divergence(c, plan);
  else {
    c.error("experiment.id", "unknown experiment '" + plan.id +
                                 "' (expected ou, gmm-sample, porous, aggregate, bayes, grid-ref, density-eval or "
                                 "divergence-bench)");
  }
  for (const auto& key : c.unused()) c.error(key, "unknown key");
  return plan;
}

}  // namespace wgflow::cli
