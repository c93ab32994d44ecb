#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bil/datagen.hpp"
#include "bil/linalg.hpp"
#include "bil/rng.hpp"

namespace bil {

enum class TrainableInit { Gaussian, Zeros };

/// Simplified two-layer transformer. Queries use the identity, so each layer
/// is described by its key matrix alone. Token and position embeddings,
/// the unembedding and the first-layer value/output matrices plus the
/// second-layer value matrix are frozen.
struct ModelParams {
  int d = 0;
  int N = 0;
  int T = 0;
  bool use_ff = true;
  double attn_scale = 1.0;

  Matrix W_E;   // d x N
  Matrix W_U;   // N x d
  Matrix P;     // d x T
  Matrix W_V1, W_O1, W_V2;
  Matrix W_K1, W_K2, W_O2;
  Matrix W_F;   // empty when use_ff is false

  [[nodiscard]] Matrix phi1() const { return W_O1 * W_V1; }
  [[nodiscard]] Matrix phi2() const { return W_O2 * W_V2; }

  /// Names of the trainable matrices in canonical order.
  [[nodiscard]] std::vector<std::string> trainable_names() const;
  Matrix& trainable(const std::string& name);
  [[nodiscard]] const Matrix& trainable(const std::string& name) const;
};

/// Frozen matrices are N(0, 1/d); trainable ones N(0, 1/d) or zero.
ModelParams init_params(int d, int N, int T, TrainableInit init, bool use_ff, const RngStream& stream,
                        double attn_scale = 1.0);

/// Quantities that depend only on the weights, computed once per batch.
/// The first-layer score of query t against key s expands into four blocks
/// because x0 = w_E(z) + p_t:
///   c (w_E(z_t) + p_t)^T W_K1 (w_E(z_s) + p_s).
struct PreparedModel {
  explicit PreparedModel(const ModelParams& params);

  const ModelParams& params;
  Matrix phi1, phi2;
  Matrix phi1_E, phi1_P;  // phi1 * W_E, phi1 * P
  Matrix k1_EE, k1_EP, k1_PE, k1_PP;
};

/// Activations of one sequence. Attention rows are query positions.
struct ForwardTrace {
  Matrix x0;
  Matrix a1, a2;
  Matrix h1, h2;
  Matrix h3;  // empty without the feed-forward layer
  Matrix logits;

  [[nodiscard]] const Matrix& final_stream() const { return h3.size() ? h3 : h2; }
};

/// Activations of B equal-length sequences. Column block
/// [b * length, (b + 1) * length) of every d x (B * length) matrix belongs
/// to sequence b.
struct BatchTrace {
  int length = 0;
  int count = 0;
  Matrix x0, v1, h1, m2, o2, h2, h3, logits;
  std::vector<Matrix> a1, a2;

  [[nodiscard]] const Matrix& final_stream() const { return h3.size() ? h3 : h2; }
  [[nodiscard]] ForwardTrace sequence(int b) const;
};

using TokenBatch = std::vector<std::span<const int>>;

TokenBatch token_views(std::span<const TaggedSequence> batch);

/// Throws std::invalid_argument on tokens outside [0, N), lengths above T,
/// or sequences of different lengths.
BatchTrace forward_batch(const PreparedModel& prep, const TokenBatch& tokens);
ForwardTrace forward(const ModelParams& params, std::span<const int> tokens);

/// Row-wise softmax over the causal prefix s <= t; entries above the
/// diagonal are set to 0. Row maxima are subtracted first.
void causal_softmax_inplace(Matrix& scores);

/// Gradient of the loss with respect to pre-softmax scores, given the
/// attention probabilities A and the gradient dA with respect to them.
Matrix softmax_backward(const Matrix& A, const Matrix& dA);

enum class MaskMode { All, InContextOnly };

/// Whether position t is supervised under mask mode (target z_{t+1}).
bool supervised(const TaggedSequence& seq, int t, MaskMode mode);

/// Loss and accuracy over a set of positions. Missing values mean the
/// corresponding mask was empty.
struct LossMetrics {
  std::optional<double> loss_all;
  std::optional<double> loss_global;
  std::optional<double> loss_icl;
  std::optional<double> acc_icl;
  std::optional<double> acc_all;
};

/// Token-weighted running sums; merging sums and then finalizing gives the
/// mean over every supervised position of every merged sequence.
struct MetricSums {
  double loss_all = 0.0, loss_global = 0.0, loss_icl = 0.0;
  double correct_all = 0.0, correct_icl = 0.0;
  long n_all = 0, n_global = 0, n_icl = 0;

  void add(const Eigen::Ref<const Matrix>& logits, const TaggedSequence& seq);
  void merge(const MetricSums& other);
  [[nodiscard]] LossMetrics finalize() const;
};

LossMetrics loss_and_metrics(const ForwardTrace& trace, const TaggedSequence& seq);

/// Mean metrics over a batch, weighting every position equally.
LossMetrics evaluate_batch(const ModelParams& params, std::span<const TaggedSequence> batch);

/// Index of the largest entry; the lowest index wins ties.
int argmax_lowest(const Eigen::Ref<const Vector>& v);

/// Log-softmax of a column.
Vector log_softmax(const Eigen::Ref<const Vector>& logits);

/// Checkpoint layout: one line of JSON
///   {"d":..,"N":..,"T":..,"use_ff":..,"attn_scale":..,
///    "matrices":[{"name":..,"rows":..,"cols":..},...]}
/// terminated by '\n', followed by each listed matrix as column-major
/// little-endian IEEE-754 doubles in the listed order.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace bil
