#include <gtest/gtest.h>

#include <cmath>

#include "bil/embeddings.hpp"
#include "bil/rng.hpp"

namespace bil {
namespace {

TEST(RngStream, SamePathSameSeed) {
  const RngStream a = RngStream(42).child("params").child(3);
  const RngStream b = RngStream(42).child("params").child(3);
  EXPECT_EQ(a.seed(), b.seed());
  EXPECT_EQ(a.engine()(), b.engine()());
}

TEST(RngStream, DistinctPathsDiffer) {
  const RngStream root(42);
  EXPECT_NE(root.child(1).seed(), root.child(2).seed());
  EXPECT_NE(root.child("a").child("b").seed(), root.child("b").child("a").seed());
  EXPECT_NE(RngStream(1).child(0).seed(), RngStream(2).child(0).seed());
}

TEST(GaussianMatrix, RejectsEmptyShapesAndBadVariance) {
  EXPECT_THROW(gaussian_matrix(0, 3, 1.0, RngStream(0)), std::invalid_argument);
  EXPECT_THROW(gaussian_matrix(3, 0, 1.0, RngStream(0)), std::invalid_argument);
  EXPECT_THROW(gaussian_matrix(3, 3, 0.0, RngStream(0)), std::invalid_argument);
}

TEST(GaussianMatrix, Deterministic) {
  const Matrix a = gaussian_matrix(17, 9, 0.5, RngStream(5).child("x"));
  const Matrix b = gaussian_matrix(17, 9, 0.5, RngStream(5).child("x"));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, gaussian_matrix(17, 9, 0.5, RngStream(5).child("y")));
}

TEST(GaussianMatrix, SingleDrawMeanOverSeeds) {
  double sum = 0.0;
  const int seeds = 100000;
  for (int s = 0; s < seeds; ++s) sum += gaussian_matrix(1, 1, 1.0, RngStream(s))(0, 0);
  EXPECT_NEAR(sum / seeds, 0.0, 0.02);
}

TEST(GaussianMatrix, VarianceMatchesRequest) {
  const Matrix m = gaussian_matrix(400, 400, 0.25, RngStream(1));
  const double var = m.array().square().mean() - std::pow(m.mean(), 2);
  // 160000 draws: standard error of the variance is 0.25 * sqrt(2 / 160000).
  EXPECT_NEAR(var, 0.25, 3 * 0.25 * std::sqrt(2.0 / 160000));
}

TEST(GaussianMatrix, ColumnNormsConcentrate) {
  int good = 0;
  for (int s = 0; s < 100; ++s) {
    const Matrix m = gaussian_matrix(128, 65, 1.0 / 128, RngStream(s));
    const auto norms = m.colwise().norm().array();
    good += (norms >= 0.7).all() && (norms <= 1.3).all();
  }
  EXPECT_GE(good, 99);
}

TEST(Orthogonality, DuplicateColumnGivesSquaredNorm) {
  EmbeddingSet set = EmbeddingSet::gaussian(256, 5, RngStream(3));
  set.vectors.col(4) = set.vectors.col(1);
  const OrthoStats s = orthogonality_report(set);
  EXPECT_DOUBLE_EQ(s.max_abs_offdiag, set.vectors.col(1).squaredNorm());
}

TEST(Orthogonality, RequiresTwoColumns) {
  EXPECT_THROW(orthogonality_report(EmbeddingSet::gaussian(8, 1, RngStream(0))), std::invalid_argument);
}

TEST(Orthogonality, HighDimensionBound) {
  const OrthoStats s = orthogonality_report(EmbeddingSet::gaussian(1024, 65, RngStream(11)));
  EXPECT_LE(s.mean_abs_offdiag, 3.0 / std::sqrt(1024.0));
  EXPECT_GT(s.min_norm, 0.0);
}

TEST(Orthogonality, LowDimensionMuchWorse) {
  const double lo = orthogonality_report(EmbeddingSet::gaussian(16, 65, RngStream(11))).mean_abs_offdiag;
  const double hi = orthogonality_report(EmbeddingSet::gaussian(1024, 65, RngStream(11))).mean_abs_offdiag;
  EXPECT_GE(lo, 4.0 * hi);
}

TEST(Orthogonality, InverseSqrtScaling) {
  std::vector<double> scaled;
  for (int d : {64, 256, 1024}) {
    double sum = 0.0;
    for (int s = 0; s < 20; ++s)
      sum += orthogonality_report(EmbeddingSet::gaussian(d, 65, RngStream(s).child(d))).mean_abs_offdiag;
    scaled.push_back(sum / 20 * std::sqrt(static_cast<double>(d)));
  }
  const double lo = *std::min_element(scaled.begin(), scaled.end());
  const double hi = *std::max_element(scaled.begin(), scaled.end());
  EXPECT_LE(hi, 2.0 * lo);
}

TEST(Remap, IdentityGivesSquaredNorms) {
  const EmbeddingSet set = EmbeddingSet::gaussian(64, 20, RngStream(2));
  const OrthoStats s = remap_report(Matrix::Identity(64, 64), set);
  EXPECT_NEAR(s.self_remap_mean_abs, set.vectors.colwise().squaredNorm().mean(), 1e-12);
}

TEST(Remap, DimensionMismatchThrows) {
  EXPECT_THROW(remap_report(Matrix::Identity(8, 8), EmbeddingSet::gaussian(16, 4, RngStream(0))),
               std::invalid_argument);
  EXPECT_THROW(remap_report(Matrix::Identity(8, 9), EmbeddingSet::gaussian(8, 4, RngStream(0))),
               std::invalid_argument);
}

TEST(Remap, GaussianRemapIsNearlyOrthogonal) {
  const int d = 1024;
  int norm_ok = 0;
  double self_worst = 0.0;
  for (int s = 0; s < 20; ++s) {
    const Matrix W0 = gaussian_matrix(d, d, 1.0 / d, RngStream(s).child("W0"));
    const OrthoStats r = remap_report(W0, EmbeddingSet::gaussian(d, 65, RngStream(s).child("E")));
    self_worst = std::max(self_worst, r.self_remap_mean_abs);
    norm_ok += r.min_norm >= 0.7 && r.max_norm <= 1.3;
  }
  EXPECT_LE(self_worst, 0.1);
  EXPECT_EQ(norm_ok, 20);
}

TEST(Remap, RemappedEmbeddingsAvoidIndependentOutputs) {
  const int d = 512;
  const Matrix W0 = gaussian_matrix(d, d, 1.0 / d, RngStream(9).child("W0"));
  const Matrix E = gaussian_matrix(d, 65, 1.0 / d, RngStream(9).child("E"));
  const Matrix U = gaussian_matrix(d, 65, 1.0 / d, RngStream(9).child("U"));
  EXPECT_LE(mean_abs_cross(W0 * E, U), 5.0 / std::sqrt(static_cast<double>(d)));
}

}  // namespace
}  // namespace bil
