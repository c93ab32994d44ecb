#include "bil/embeddings.hpp"

#include <cmath>
#include <stdexcept>

namespace bil {

Matrix gaussian_matrix(Index rows, Index cols, double variance, const RngStream& stream) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("gaussian_matrix: empty shape");
  if (!(variance > 0.0)) throw std::invalid_argument("gaussian_matrix: variance must be positive");
  auto engine = stream.engine();
  std::normal_distribution<double> normal(0.0, std::sqrt(variance));
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = normal(engine);
  return m;
}

EmbeddingSet EmbeddingSet::gaussian(Index d, Index n, const RngStream& stream) {
  return {gaussian_matrix(d, n, 1.0 / static_cast<double>(d), stream)};
}

namespace {

void fill_norms(const Matrix& columns, OrthoStats& out) {
  Vector norms = columns.colwise().norm().transpose();
  out.min_norm = norms.minCoeff();
  out.max_norm = norms.maxCoeff();
}

}  // namespace

OrthoStats orthogonality_report(const EmbeddingSet& set) {
  const Index n = set.count();
  if (n < 2) throw std::invalid_argument("orthogonality_report: need at least two vectors");
  const Matrix gram = set.vectors.transpose() * set.vectors;
  OrthoStats s;
  double sum = 0.0;
  for (Index j = 1; j < n; ++j)
    for (Index i = 0; i < j; ++i) {
      const double v = std::abs(gram(i, j));
      sum += v;
      s.max_abs_offdiag = std::max(s.max_abs_offdiag, v);
    }
  s.mean_abs_offdiag = sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
  fill_norms(set.vectors, s);
  return s;
}

OrthoStats remap_report(const Matrix& remap, const EmbeddingSet& set) {
  if (remap.rows() != remap.cols() || remap.cols() != set.dim())
    throw std::invalid_argument("remap_report: remapping must be square and match the embedding dimension");
  const Index n = set.count();
  const Matrix mapped = remap * set.vectors;
  const Matrix cross = set.vectors.transpose() * mapped;  // (i, j) = e_i^T W0 e_j
  OrthoStats s;
  double self_sum = 0.0, off_sum = 0.0;
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) {
      const double v = std::abs(cross(i, j));
      if (i == j) {
        self_sum += v;
      } else {
        off_sum += v;
        s.max_abs_offdiag = std::max(s.max_abs_offdiag, v);
      }
    }
  s.self_remap_mean_abs = self_sum / static_cast<double>(n);
  if (n > 1) s.mean_abs_offdiag = off_sum / (static_cast<double>(n) * static_cast<double>(n - 1));
  fill_norms(mapped, s);
  return s;
}

double mean_abs_cross(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("mean_abs_cross: dimension mismatch");
  return (a.transpose() * b).cwiseAbs().mean();
}

}  // namespace bil
