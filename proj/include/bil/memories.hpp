#pragma once

#include "bil/datagen.hpp"
#include "bil/model.hpp"
#include "bil/probes.hpp"
#include "bil/train.hpp"

namespace bil {

struct OracleConfig {
  double beta = 20.0;  // sharpening applied to both key matrices
  bool exclude_triggers_from_wf = true;
  bool use_ff = true;
  double kl_eps = 1e-6;
  Wk2Support wk2_support = Wk2Support::TriggerSupport;

  void validate() const;
};

/// Ideal weights built from the frozen embeddings:
///   W_K1 = sum_{t=2..T} p_t p_{t-1}^T
///   W_K2 = sum_{k in trigger support} w_E(k) (phi1 w_E(k))^T
///   W_O2 = sum_k w_U(k) (W_V2 w_E(k))^T
///   W_F  = sum_{i,j} log pi~_b(j|i) w_U(j) w_E(i)^T
/// With exclude_triggers_from_wf and fixed triggers, inputs i in Q are
/// dropped from W_F; random-trigger mode drops nothing.
struct TargetMatrices {
  Matrix W_K1, W_K2, W_O2, W_F;
};

TargetMatrices build_target_memories(const ModelParams& params, const TriggerConfig& trig, const MarkovSpec& spec,
                                     bool exclude_triggers_from_wf = true, double kl_eps = 1e-6,
                                     Wk2Support support = Wk2Support::TriggerSupport);

/// Copy of `params` with beta W_K1*, beta W_K2*, W_O2* and (when
/// cfg.use_ff) W_F* installed.
ModelParams install_oracle(const ModelParams& params, const TargetMatrices& targets, const OracleConfig& cfg);

struct OracleReport {
  LossMetrics metrics;
  std::optional<double> kl_wf;
  double smoothed_entropy_rate = 0.0;  // entropy rate of the smoothed bigram table
  long icl_positions = 0;
};

/// Builds the oracle for freshly initialized frozen matrices and evaluates
/// it on n_batches fresh batches drawn from the "eval" substream.
OracleReport oracle_model_eval(const MarkovSpec& spec, const TriggerConfig& trig, const Geometry& geometry,
                               const OracleConfig& cfg, int n_batches, int batch_size, const RngStream& stream);

OracleReport evaluate_oracle(const ModelParams& oracle, const MarkovSpec& spec, const TriggerConfig& trig,
                             const OracleConfig& cfg, int n_batches, int batch_size, const RngStream& stream);

struct FactoredReport {
  Matrix scores;  // scores(k, l) = y_k^T (d / 2d') U V x_l
  double diag_mean = 0.0, diag_min = 0.0, diag_max = 0.0;
  double offdiag_mean_abs = 0.0, offdiag_max_abs = 0.0;
};

/// Low-rank memory U V with U = U0 + sum_i y_i (V0 x_i)^T and
/// V = V0 + sum_i (U0^T y_i) x_i^T, where U0 (d x d') and V0 (d' x d) are
/// N(0, 1/d). The first n_stored columns of X, Y are stored; scores cover
/// every column pair. n_stored < 0 stores all of them.
FactoredReport factored_memory_report(const Matrix& X, const Matrix& Y, int d_prime, const RngStream& stream,
                                      int n_stored = -1);

}  // namespace bil
