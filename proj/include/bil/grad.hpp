#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bil/datagen.hpp"
#include "bil/model.hpp"

namespace bil {

/// Gradients of the trainable matrices only; W_F is empty without the
/// feed-forward layer.
struct Grads {
  Matrix W_K1, W_K2, W_O2, W_F;

  Matrix& operator[](const std::string& name);
  const Matrix& operator[](const std::string& name) const;
  [[nodiscard]] bool all_finite() const;
};

class EmptyBatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackwardResult {
  double loss = 0.0;       // mean cross-entropy over supervised positions
  long supervised = 0;     // number of supervised positions in the batch
  Grads grads;
  MetricSums metrics;      // all masks, computed from the same forward pass
};

/// Sequences per reduction chunk. Chunks are reduced in index order, so
/// results do not depend on the worker count.
inline constexpr std::size_t kBackwardChunk = 8;

/// Exact gradient of the mean masked cross-entropy over every supervised
/// position of the batch. Throws EmptyBatchError when no position is
/// supervised.
BackwardResult backward(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode);

/// Mean masked cross-entropy, forward only.
double batch_loss(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode);

struct Coordinate {
  std::string matrix;
  Index row = 0;
  Index col = 0;
};

/// `per_matrix` uniformly drawn coordinates of every trainable matrix.
std::vector<Coordinate> sample_coordinates(const ModelParams& params, int per_matrix, const RngStream& stream);

/// Central differences (f(w + eps) - f(w - eps)) / 2 eps of an arbitrary
/// function of the parameters. eps must lie in [1e-7, 1e-3].
std::vector<double> finite_diff_gradient(const std::function<double(const ModelParams&)>& f, const ModelParams& params,
                                         const std::vector<Coordinate>& coords, double eps);

std::vector<double> finite_diff_gradient(const ModelParams& params, std::span<const TaggedSequence> batch,
                                         MaskMode mode, double eps, const std::vector<Coordinate>& coords);

/// |a - n| / max(|a| + |n|, 1e-5).
double relative_error(double analytic, double numeric);

struct GradcheckFailure {
  Coordinate coord;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  std::size_t checked = 0;
  std::vector<GradcheckFailure> failing;
  [[nodiscard]] bool passed() const { return max_rel_err <= tol; }
};

/// Compares `analytic` with central differences at the given coordinates.
GradcheckReport gradcheck(const Grads& analytic, const ModelParams& params, std::span<const TaggedSequence> batch,
                          MaskMode mode, const std::vector<Coordinate>& coords, double tol, double eps = 1e-5);

/// Same, with `analytic` taken from backward().
GradcheckReport gradcheck(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode,
                          const std::vector<Coordinate>& coords, double tol, double eps = 1e-5);

/// One weighted example for a single linear readout layer.
struct ReadoutExample {
  int input = 0;   // token fed through w_E
  int target = 0;  // supervised class
  double weight = 0.0;
};

/// Gradient of sum_i weight_i * CE(softmax(W_U W w_E(input_i)), target_i)
/// with respect to W, by backpropagation through the readout.
Matrix readout_backward(const Matrix& W, const Matrix& W_E, const Matrix& W_U,
                        const std::vector<ReadoutExample>& examples);

}  // namespace bil
