#pragma once

#include "bil/linalg.hpp"
#include "bil/rng.hpp"

namespace bil {

/// Matrix with i.i.d. N(0, variance) entries, filled column by column from
/// `stream`. Throws std::invalid_argument on empty shapes or variance <= 0.
Matrix gaussian_matrix(Index rows, Index cols, double variance, const RngStream& stream);

/// Column i holds the embedding of item i.
struct EmbeddingSet {
  Matrix vectors;

  /// d x n set with N(0, 1/d) entries.
  static EmbeddingSet gaussian(Index d, Index n, const RngStream& stream);

  [[nodiscard]] Index dim() const { return vectors.rows(); }
  [[nodiscard]] Index count() const { return vectors.cols(); }
};

/// Summary of how close a family of vectors is to orthonormal.
struct OrthoStats {
  double mean_abs_offdiag = 0.0;
  double max_abs_offdiag = 0.0;
  double min_norm = 0.0;
  double max_norm = 0.0;
  double self_remap_mean_abs = 0.0;
};

/// Exact statistics over all pairs i < j of |<e_i, e_j>| and over all norms.
/// Requires at least two columns.
OrthoStats orthogonality_report(const EmbeddingSet& set);

/// Statistics of the remapped set W0 * E: norms of the remapped columns,
/// mean |x^T W0 x| over columns, and |<W0 e_i, e_j>| over i != j.
OrthoStats remap_report(const Matrix& remap, const EmbeddingSet& set);

/// Mean of |a_i^T b_j| over all column pairs of two independent families.
double mean_abs_cross(const Matrix& a, const Matrix& b);

}  // namespace bil
