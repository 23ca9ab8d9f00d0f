#pragma once

// Unnormalized target densities for KL flows, including the Bayesian
// logistic-regression posterior and its dataset handling.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "wgflow/analytic.hpp"
#include "wgflow/error.hpp"
#include "wgflow/gaussian.hpp"
#include "wgflow/random.hpp"

namespace wgflow::targets {

/// log q~(x) and its score for a batch of points (one per row).
class TargetDensity {
 public:
  using Eval = std::function<void(const Matrix& x, Vector& logq, Matrix& score)>;

  TargetDensity() = default;
  TargetDensity(std::string tag, Index dim, Eval eval) : tag_(std::move(tag)), dim_(dim), eval_(std::move(eval)) {}

  const std::string& tag() const { return tag_; }
  Index dim() const { return dim_; }

  void evaluate(const Matrix& x, Vector& logq, Matrix& score) const {
    if (x.cols() != dim_) {
      throw InvalidArgument("target '" + tag_ + "': point dimension " + std::to_string(x.cols()) + " != " +
                            std::to_string(dim_));
    }
    eval_(x, logq, score);
    if (!logq.allFinite() || !score.allFinite()) throw Error("target '" + tag_ + "': non-finite log-density");
  }
  Vector log_density(const Matrix& x) const {
    Vector l;
    Matrix s;
    evaluate(x, l, s);
    return l;
  }
  Matrix score(const Matrix& x) const {
    Vector l;
    Matrix s;
    evaluate(x, l, s);
    return s;
  }

  /// Same target shifted by an additive constant (scores unchanged).
  TargetDensity shifted(double c) const {
    Eval inner = eval_;
    return TargetDensity(tag_, dim_, [inner, c](const Matrix& x, Vector& l, Matrix& s) {
      inner(x, l, s);
      l.array() += c;
    });
  }

 private:
  std::string tag_;
  Index dim_ = 0;
  Eval eval_;
};

inline TargetDensity gaussian_target(const Gaussian& g) {
  spd_cholesky(g.cov, "target covariance");
  return TargetDensity("gaussian", g.dim(), [g](const Matrix& x, Vector& l, Matrix& s) {
    l = g.log_density(x);
    s = g.score(x);
  });
}

inline TargetDensity gmm_target(const analytic::GMMSpec& spec) {
  analytic::validate(spec);
  return TargetDensity("gmm", spec.dim(), [spec](const Matrix& x, Vector& l, Matrix& s) {
    analytic::gmm_log_density_and_score(spec, x, l, s);
  });
}

/// OU stationary target exp(-(x-b)^T A (x-b) / 2).
inline TargetDensity ou_target(const analytic::OUSpec& spec) {
  analytic::validate(spec);
  return TargetDensity("ou", spec.b.size(), [spec](const Matrix& x, Vector& l, Matrix& s) {
    const Matrix c = x.rowwise() - spec.b.transpose();
    const Matrix ac = c * spec.A;
    l = -0.5 * (ac.array() * c.array()).rowwise().sum().matrix();
    s = -ac;
  });
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  Matrix features;  // S x d
  Vector labels;    // +-1
  Index size() const { return features.rows(); }
};

enum class DataFormat { Csv, Libsvm };

inline DataFormat data_format_from_string(const std::string& s) {
  if (s == "csv") return DataFormat::Csv;
  if (s == "libsvm") return DataFormat::Libsvm;
  throw InvalidArgument("unknown dataset format '" + s + "' (expected csv or libsvm)");
}

namespace detail {

inline double normalize_label(double y, const std::string& where) {
  if (y == 1.0) return 1.0;
  if (y == -1.0 || y == 0.0) return -1.0;
  throw InvalidArgument(where + ": label must be in {-1, +1} or {0, 1}, got " + std::to_string(y));
}

inline bool parse_double(const std::string& tok, double& out) {
  std::size_t pos = 0;
  try {
    out = std::stod(tok, &pos);
  } catch (...) {
    return false;
  }
  while (pos < tok.size() && std::isspace(static_cast<unsigned char>(tok[pos]))) ++pos;
  return pos == tok.size();
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  return out;
}

}  // namespace detail

/// Loads a dataset. For CSV, `label_column` < 0 counts from the end (-1 = last column);
/// a non-numeric first line is treated as a header. LIBSVM indices are 1-based.
inline Dataset load_dataset(const std::string& path, DataFormat format, int label_column = -1,
                            bool standardize = false) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open dataset '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::string line;
  int lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    if (format == DataFormat::Csv) {
      const auto toks = detail::split(line, ',');
      std::vector<double> vals;
      bool numeric = true;
      for (const auto& t : toks) {
        double v;
        if (!detail::parse_double(t, v)) {
          numeric = false;
          break;
        }
        vals.push_back(v);
      }
      if (!numeric) {
        if (rows.empty() && labels.empty() && lineno == 1) continue;  // header
        throw InvalidArgument(where + ": malformed CSV row");
      }
      if (vals.size() < 2) throw InvalidArgument(where + ": need at least one feature and a label");
      if (width == 0) width = vals.size();
      if (vals.size() != width) throw InvalidArgument(where + ": inconsistent column count");
      const int lc = label_column < 0 ? static_cast<int>(vals.size()) + label_column : label_column;
      if (lc < 0 || lc >= static_cast<int>(vals.size())) throw InvalidArgument(where + ": label column out of range");
      labels.push_back(detail::normalize_label(vals[static_cast<std::size_t>(lc)], where));
      vals.erase(vals.begin() + lc);
      rows.push_back(std::move(vals));
    } else {
      std::istringstream ss(line);
      std::string tok;
      ss >> tok;
      double y;
      if (!detail::parse_double(tok, y)) throw InvalidArgument(where + ": malformed label '" + tok + "'");
      labels.push_back(detail::normalize_label(y, where));
      std::vector<double> vals;
      while (ss >> tok) {
        const auto colon = tok.find(':');
        double idx, v;
        if (colon == std::string::npos || !detail::parse_double(tok.substr(0, colon), idx) ||
            !detail::parse_double(tok.substr(colon + 1), v) || idx < 1 || idx != std::floor(idx)) {
          throw InvalidArgument(where + ": malformed libsvm entry '" + tok + "'");
        }
        const auto k = static_cast<std::size_t>(idx);
        if (vals.size() < k) vals.resize(k, 0.0);
        vals[k - 1] = v;
      }
      width = std::max(width, vals.size());
      rows.push_back(std::move(vals));
    }
  }
  if (rows.empty()) throw InvalidArgument("dataset '" + path + "' contains no rows");
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  Dataset d;
  d.features = Matrix::Zero(static_cast<Index>(rows.size()), static_cast<Index>(cols));
  d.labels.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) d.features(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    d.labels(static_cast<Index>(i)) = labels[i];
  }
  if (standardize) {
    const RowVector mean = d.features.colwise().mean();
    Matrix c = d.features.rowwise() - mean;
    RowVector sd = (c.array().square().colwise().sum() / static_cast<double>(d.size())).sqrt();
    for (Index j = 0; j < sd.size(); ++j)
      if (sd(j) > 0.0) c.col(j) /= sd(j);
    d.features = c;
  }
  return d;
}

/// Seeded shuffle, then the first round(ratio * S) rows become the training set.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw InvalidArgument("split: ratio must lie in (0, 1)");
  Rng rng(seed);
  std::vector<Index> idx = sample_indices(rng, d.size(), d.size());
  const auto n_train = static_cast<Index>(std::llround(train_ratio * static_cast<double>(d.size())));
  Dataset tr, te;
  tr.features.resize(n_train, d.features.cols());
  tr.labels.resize(n_train);
  te.features.resize(d.size() - n_train, d.features.cols());
  te.labels.resize(d.size() - n_train);
  for (Index i = 0; i < d.size(); ++i) {
    const Index src = idx[static_cast<std::size_t>(i)];
    if (i < n_train) {
      tr.features.row(i) = d.features.row(src);
      tr.labels(i) = d.labels(src);
    } else {
      te.features.row(i - n_train) = d.features.row(src);
      te.labels(i - n_train) = d.labels(src);
    }
  }
  return {tr, te};
}

/// Labels drawn from a logistic model with weights w_true on standard normal features.
inline Dataset synthetic_logistic_dataset(Index count, const Vector& w_true, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.features = standard_normal(rng, count, w_true.size());
  d.labels.resize(count);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index i = 0; i < count; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-d.features.row(i).dot(w_true)));
    d.labels(i) = u(rng) < p ? 1.0 : -1.0;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Bayesian logistic regression, x = [w (d entries), log alpha].
// Priors: w | alpha ~ N(0, alpha^{-1} I), alpha ~ Gamma(shape 1, rate 0.01).

struct LogisticPosterior {
  Dataset data;
  double prior_shape = 1.0;
  double prior_rate = 0.01;

  Index dim() const { return data.features.cols() + 1; }
};

namespace detail {

inline double log_sigmoid(double t) { return t >= 0.0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); }
inline double sigmoid(double t) { return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

/// Likelihood over the given rows scaled by `scale`, plus priors and the log-alpha Jacobian.
inline void logistic_eval(const LogisticPosterior& post, const Matrix& x, const std::vector<Index>* rows, double scale,
                          Vector& logq, Matrix& score) {
  const Index d = post.data.features.cols();
  if (x.cols() != d + 1) throw InvalidArgument("logistic posterior: expected dimension " + std::to_string(d + 1));
  const Index N = x.rows();
  logq.setZero(N);
  score.setZero(N, d + 1);
  const Index S = rows ? static_cast<Index>(rows->size()) : post.data.size();
  for (Index p = 0; p < N; ++p) {
    const Vector w = x.row(p).head(d).transpose();
    const double u = x(p, d);
    const double alpha = std::exp(u);
    double ll = 0.0;
    Vector gw = Vector::Zero(d);
    for (Index s = 0; s < S; ++s) {
      const Index r = rows ? (*rows)[static_cast<std::size_t>(s)] : s;
      const double y = post.data.labels(r);
      const double t = y * post.data.features.row(r).dot(w);
      ll += log_sigmoid(t);
      gw += (y * (1.0 - sigmoid(t))) * post.data.features.row(r).transpose();
    }
    const double half_d = 0.5 * static_cast<double>(d);
    const double wn = w.squaredNorm();
    logq(p) = scale * ll + half_d * u - 0.5 * alpha * wn - half_d * std::log(2.0 * std::numbers::pi) +
              post.prior_shape * std::log(post.prior_rate) - std::lgamma(post.prior_shape) +
              (post.prior_shape - 1.0) * u - post.prior_rate * alpha + u;
    score.row(p).head(d) = (scale * gw - alpha * w).transpose();
    score(p, d) = half_d - 0.5 * alpha * wn + (post.prior_shape - 1.0) - post.prior_rate * alpha + 1.0;
  }
}

}  // namespace detail

inline void posterior_logdensity(const LogisticPosterior& post, const Matrix& x, Vector& logq, Matrix& score) {
  detail::logistic_eval(post, x, nullptr, 1.0, logq, score);
}

/// Subsampled likelihood scaled by S / |batch| plus the exact prior terms.
inline void minibatch_logdensity(const LogisticPosterior& post, const Matrix& x, const std::vector<Index>& batch,
                                 Vector& logq, Matrix& score) {
  if (batch.empty()) throw InvalidArgument("minibatch_logdensity: empty batch");
  for (Index r : batch)
    if (r < 0 || r >= post.data.size()) throw InvalidArgument("minibatch_logdensity: row index out of range");
  const double scale = static_cast<double>(post.data.size()) / static_cast<double>(batch.size());
  detail::logistic_eval(post, x, &batch, scale, logq, score);
}

inline TargetDensity logistic_target(LogisticPosterior post) {
  const Index n = post.dim();
  return TargetDensity("logistic", n, [post = std::move(post)](const Matrix& x, Vector& l, Matrix& s) {
    posterior_logdensity(post, x, l, s);
  });
}

struct PredictiveResult {
  double accuracy = 0.0;
  double log_likelihood = 0.0;
};

/// Bayesian model average of sigma(y w^T f) over the posterior samples (rows = [w, log alpha]).
inline PredictiveResult predictive_eval(const Matrix& samples, const Dataset& test) {
  if (samples.rows() < 1) throw InvalidArgument("predictive_eval: need at least one posterior sample");
  const Index d = test.features.cols();
  if (samples.cols() != d + 1 && samples.cols() != d) {
    throw InvalidArgument("predictive_eval: sample dimension does not match the features");
  }
  const Matrix logits = test.features * samples.leftCols(d).transpose();  // S_test x K
  PredictiveResult r;
  for (Index i = 0; i < test.size(); ++i) {
    double p = 0.0;
    for (Index k = 0; k < logits.cols(); ++k) p += detail::sigmoid(test.labels(i) * logits(i, k));
    p /= static_cast<double>(logits.cols());
    r.accuracy += p > 0.5 ? 1.0 : (p == 0.5 ? 0.5 : 0.0);
    r.log_likelihood += std::log(std::max(p, 1e-300));
  }
  r.accuracy /= static_cast<double>(test.size());
  r.log_likelihood /= static_cast<double>(test.size());
  return r;
}

}  // namespace wgflow::targets
