#include <CLI11.hpp>

#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>

#include "experiments.hpp"

namespace {

using namespace wgflow;
using namespace wgflow::cli;

constexpr int exit_runtime = 1;
constexpr int exit_invalid = 2;
constexpr int exit_checks = 3;

/// WGFLOW_THREADS: 0 (default) means single-threaded.
long long thread_cap() {
  const char* v = std::getenv("WGFLOW_THREADS");
  if (!v) return 0;
  auto n = parse_int(v);
  if (!n || *n < 0) throw InvalidArgument("WGFLOW_THREADS must be a nonnegative integer, got '" + std::string(v) + "'");
  return *n;
}

std::optional<Config> load_config(const std::string& path) {
  try {
    return Config::load(path);
  } catch (const std::exception& e) {
    std::cerr << "error: cannot read config '" << path << "': " << e.what() << "\n";
    return std::nullopt;
  }
}

bool report_errors(const Config& c) {
  if (c.errors().empty()) return false;
  for (const auto& e : c.errors()) std::cerr << "error: " << e << "\n";
  return true;
}

int cmd_validate(const std::string& path, std::optional<std::uint64_t> seed) {
  auto c = load_config(path);
  if (!c) return exit_invalid;
  build_plan(*c, seed);
  if (report_errors(*c)) return exit_invalid;
  std::cout << "ok\n";
  return 0;
}

int cmd_run(const std::string& path, std::optional<std::uint64_t> seed, std::string out) {
  auto c = load_config(path);
  if (!c) return exit_invalid;
  Plan plan = build_plan(*c, seed);
  if (report_errors(*c)) return exit_invalid;
  if (out.empty()) out = plan.output;
  const long long threads = thread_cap();
  RunContext ctx;
  ctx.out = out;
  fs::create_directories(ctx.out);
  ctx.manifest["experiment"] = plan.id;
  ctx.manifest["seed"] = plan.seed;
  ctx.manifest["threads"] = threads;
  ctx.manifest["versions"] = {{"wgflow", version}, {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                                 std::to_string(EIGEN_MINOR_VERSION)}};
  const json summary = plan.run(ctx);
  ctx.manifest["config"] = c->resolved();
  ctx.manifest["final"] = summary;
  bool ok = true;
  json checks = json::array();
  for (const auto& ch : plan.checks) {
    const bool present = summary.contains(ch.metric) && summary[ch.metric].is_number();
    const double v = present ? summary[ch.metric].get<double>() : std::nan("");
    const bool pass = present && (ch.kind == "max" ? v <= ch.threshold : v >= ch.threshold);
    ok = ok && pass;
    checks.push_back({{"metric", ch.metric}, {"kind", ch.kind}, {"threshold", ch.threshold},
                      {"value", present ? json(v) : json(nullptr)}, {"pass", pass}});
    std::cout << (pass ? "PASS " : "FAIL ") << ch.metric << " " << (present ? format_number(v) : "missing")
              << (ch.kind == "max" ? " <= " : " >= ") << format_number(ch.threshold) << "\n";
  }
  ctx.manifest["checks"] = checks;
  write_json(ctx.out / "manifest.json", ctx.manifest);
  std::cout << summary.dump() << "\n";
  return ok ? 0 : exit_checks;
}

std::optional<std::pair<double, double>> parse_domain(const std::string& s) {
  const auto parts = split(s, ',');
  if (parts.size() != 2) return std::nullopt;
  auto lo = parse_double(parts[0]), hi = parse_double(parts[1]);
  if (!lo || !hi || !(*hi > *lo)) return std::nullopt;
  return std::make_pair(*lo, *hi);
}

/// Target for the `metrics` subcommand: [target] type = gaussian | gmm | ou.
std::optional<targets::TargetDensity> read_target(Config& c, std::optional<Gaussian>& gaussian) {
  const auto type = c.required_str("target.type");
  if (!type) return std::nullopt;
  if (*type == "gaussian") {
    const auto mean = c.reals("target.mean", {});
    if (mean.empty()) {
      c.error("target.mean", "missing required field");
      return std::nullopt;
    }
    Gaussian g{to_vector(mean), Matrix::Identity(static_cast<Index>(mean.size()), static_cast<Index>(mean.size()))};
    if (auto cov = c.matrix("target.cov")) g.cov = *cov;
    gaussian = g;
    return targets::gaussian_target(g);
  }
  if (*type == "gmm") {
    auto g = read_gmm(c, "target");
    if (!g) return std::nullopt;
    return targets::gmm_target(*g);
  }
  if (*type == "ou") {
    auto s = read_ou(c, "target");
    if (!s) return std::nullopt;
    gaussian = analytic::ou_stationary(*s);
    return targets::ou_target(*s);
  }
  c.error("target.type", "expected gaussian, gmm or ou");
  return std::nullopt;
}

int cmd_metrics(const std::string& samples_path, const std::string& reference, const std::string& target_config,
                const std::string& metric, double bandwidth) {
  if (reference.empty() == target_config.empty()) {
    std::cerr << "error: metrics needs exactly one of --reference or --config\n";
    return exit_invalid;
  }
  Matrix x;
  try {
    x = read_points(samples_path);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_invalid;
  }
  json out{{"metric", metric}, {"stderr", nullptr}};
  if (!reference.empty()) {
    Matrix y;
    try {
      y = read_points(reference);
    } catch (const InvalidArgument& e) {
      std::cerr << "error: " << e.what() << "\n";
      return exit_invalid;
    }
    if (y.cols() != x.cols()) {
      std::cerr << "error: samples and reference differ in dimension\n";
      return exit_invalid;
    }
    if (metric == "symkl") {
      out["value"] = metrics::symkl(empirical_gaussian(x), empirical_gaussian(y));
    } else if (metric == "moment_gap") {
      out["value"] = metrics::moment_gap(x, y);
    } else {
      std::cerr << "error: --metric " << metric << " needs a target (--config); with --reference use symkl or "
                << "moment_gap\n";
      return exit_invalid;
    }
  } else {
    auto c = load_config(target_config);
    if (!c) return exit_invalid;
    std::optional<Gaussian> g;
    auto q = read_target(*c, g);
    for (const auto& key : c->unused()) c->error(key, "unknown key");
    if (report_errors(*c)) return exit_invalid;
    if (q->dim() != x.cols()) {
      std::cerr << "error: samples have " << x.cols() << " columns, target dimension is " << q->dim() << "\n";
      return exit_invalid;
    }
    if (metric == "ksd") {
      out["value"] = metrics::ksd(x, q->score(x), {bandwidth});
    } else if (metric == "symkl") {
      if (!g) {
        std::cerr << "error: symkl against a target needs a Gaussian target (gaussian or ou)\n";
        return exit_invalid;
      }
      out["value"] = metrics::symkl(empirical_gaussian(x), *g);
    } else {
      std::cerr << "error: unknown metric '" << metric << "' (expected symkl, ksd or moment_gap)\n";
      return exit_invalid;
    }
  }
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational Wasserstein gradient flows"};
  app.require_subcommand(1);

  std::string config, out;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run an experiment");
  run->add_option("--config", config, "Experiment INI file")->required();
  run->add_option("--seed", seed, "Override experiment.seed");
  run->add_option("--out", out, "Output directory (overrides experiment.output)");

  auto* val = app.add_subcommand("validate", "Validate an experiment file without running it");
  val->add_option("--config", config, "Experiment INI file")->required();
  val->add_option("--seed", seed, "Override experiment.seed");

  std::string state, points;
  int step = -1;
  auto* dens = app.add_subcommand("eval-density", "Evaluate log-densities of a saved flow");
  dens->add_option("--state", state, "FlowState directory")->required();
  dens->add_option("--points", points, "CSV with one point per row")->required();
  dens->add_option("--step", step, "Flow step (default: last)");
  dens->add_option("--out", out, "Output CSV (default: stdout)");

  GridRefOptions g;
  std::string domain;
  auto* grid = app.add_subcommand("grid-ref", "1D grid JKO reference for the porous medium equation");
  grid->add_option("--m", g.m, "Exponent m > 1")->required();
  grid->add_option("--a", g.a, "Step size")->required();
  grid->add_option("--steps", g.steps, "Number of JKO steps")->required();
  grid->add_option("--d", g.d, "Number of cells")->required();
  grid->add_option("--domain", domain, "lo,hi (default: 1.5x the final Barenblatt support)");
  grid->add_option("--init", g.init, "barenblatt | uniform | file")->required();
  grid->add_option("--init-file", g.init_file, "One density value per cell");
  grid->add_option("--t0", g.barenblatt.t0, "Barenblatt time offset");
  grid->add_option("--C", g.barenblatt.C, "Barenblatt constant");
  grid->add_flag("--mass-rescale", g.mass_rescale, "Rescale time by the Barenblatt mass");
  grid->add_option("--tol", g.tol, "Solver tolerance");
  grid->add_option("--out", out, "Output CSV (default: stdout)");

  std::string samples, reference, metric;
  double bandwidth = 0.0;
  auto* met = app.add_subcommand("metrics", "Sample-quality metrics");
  met->add_option("--samples", samples, "Samples CSV")->required();
  met->add_option("--reference", reference, "Reference samples CSV");
  met->add_option("--config", config, "Target INI file ([target] section)");
  met->add_option("--metric", metric, "symkl | ksd | moment_gap")->required();
  met->add_option("--bandwidth", bandwidth, "KSD bandwidth (default: median heuristic)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_invalid;
  }

  try {
    thread_cap();
    if (*run) return cmd_run(config, seed, out);
    if (*val) return cmd_validate(config, seed);
    if (*dens) {
      const Matrix res = eval_density(state, read_points(points), step);
      if (out.empty()) write_density(std::cout, res);
      else write_density(fs::path(out), res);
      return 0;
    }
    if (*grid) {
      if (!domain.empty()) {
        g.domain = parse_domain(domain);
        if (!g.domain) throw InvalidArgument("--domain: expected lo,hi with lo < hi");
      }
      const auto r = run_grid_ref(g);
      if (out.empty()) write_grid_ref(std::cout, r);
      else write_grid_ref(fs::path(out), r);
      return 0;
    }
    if (*met) return cmd_metrics(samples, reference, config, metric, bandwidth);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_invalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_runtime;
  }
  return exit_invalid;
}
