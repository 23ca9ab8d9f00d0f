#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace wgflow {

using Rng = std::mt19937_64;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

inline Matrix standard_normal(Rng& rng, Index rows, Index cols) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  // Fill row by row so that a prefix of rows is reproducible for any batch size.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Matrix uniform(Rng& rng, Index rows, const RowVector& lower, const RowVector& upper) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, lower.size());
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < lower.size(); ++j) m(i, j) = lower(j) + (upper(j) - lower(j)) * dist(rng);
  return m;
}

/// Draws `count` distinct row indices from [0, n) (without replacement when count <= n).
inline std::vector<Index> sample_indices(Rng& rng, Index n, Index count) {
  std::vector<Index> idx;
  if (count >= n) {
    idx.resize(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  }
  // Partial Fisher-Yates over a lazily materialized permutation.
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = 0; i < count; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  perm.resize(static_cast<std::size_t>(count));
  return perm;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace wgflow
