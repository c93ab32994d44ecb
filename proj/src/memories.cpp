#include "bil/memories.hpp"

#include <cmath>

#include "bil/embeddings.hpp"

namespace bil {

void OracleConfig::validate() const {
  if (!(beta >= 0.0)) throw std::invalid_argument("oracle.beta must be nonnegative");
  if (!(kl_eps >= 0.0)) throw std::invalid_argument("oracle.kl_eps must be nonnegative");
}

TargetMatrices build_target_memories(const ModelParams& params, const TriggerConfig& trig, const MarkovSpec& spec,
                                     bool exclude_triggers_from_wf, double kl_eps, Wk2Support support) {
  if (spec.N != params.N) throw std::invalid_argument("build_target_memories: vocabulary mismatch");
  const int d = params.d;
  TargetMatrices out;

  out.W_K1 = Matrix::Zero(d, d);
  if (params.T >= 2)
    out.W_K1.noalias() = params.P.rightCols(params.T - 1) * params.P.leftCols(params.T - 1).transpose();

  std::vector<int> tokens;
  if (support == Wk2Support::FullVocabulary)
    for (int k = 0; k < params.N; ++k) tokens.push_back(k);
  else
    tokens = trig.support(spec);
  const Matrix remapped = params.phi1() * params.W_E;
  out.W_K2 = Matrix::Zero(d, d);
  for (int k : tokens) out.W_K2.noalias() += params.W_E.col(k) * remapped.col(k).transpose();

  out.W_O2 = params.W_U.transpose() * (params.W_V2 * params.W_E).transpose();

  // M(j, i) = log pi~_b(j | i); column i is the input token.
  Matrix M = smoothed_bigram(spec, kl_eps).transpose().array().log();
  if (exclude_triggers_from_wf && trig.mode == TriggerMode::Fixed)
    for (int q : trig.fixed_set) M.col(q).setZero();
  if (!M.allFinite()) throw std::invalid_argument("build_target_memories: zero bigram entry with kl_eps = 0");
  out.W_F = params.W_U.transpose() * M * params.W_E.transpose();
  return out;
}

ModelParams install_oracle(const ModelParams& params, const TargetMatrices& targets, const OracleConfig& cfg) {
  cfg.validate();
  ModelParams p = params;
  p.W_K1 = cfg.beta * targets.W_K1;
  p.W_K2 = cfg.beta * targets.W_K2;
  p.W_O2 = targets.W_O2;
  p.use_ff = cfg.use_ff;
  p.W_F = cfg.use_ff ? targets.W_F : Matrix();
  return p;
}

OracleReport evaluate_oracle(const ModelParams& oracle, const MarkovSpec& spec, const TriggerConfig& trig,
                             const OracleConfig& cfg, int n_batches, int batch_size, const RngStream& stream) {
  if (n_batches < 1 || batch_size < 1) throw std::invalid_argument("oracle evaluation needs at least one sequence");
  const SequenceSampler sampler(spec, trig);
  const PreparedModel prep(oracle);
  MetricSums sums;
  for (int b = 0; b < n_batches; ++b) {
    const auto batch = sampler.sample_batch(oracle.T, batch_size, stream.child(static_cast<std::uint64_t>(b)));
    for (std::size_t lo = 0; lo < batch.size(); lo += kBackwardChunk) {
      const auto part = std::span(batch).subspan(lo, std::min(kBackwardChunk, batch.size() - lo));
      const BatchTrace bt = forward_batch(prep, token_views(part));
      for (int i = 0; i < bt.count; ++i)
        sums.add(bt.logits.middleCols(static_cast<Index>(i) * bt.length, bt.length), part[i]);
    }
  }
  OracleReport r;
  r.metrics = sums.finalize();
  r.icl_positions = sums.n_icl;
  if (oracle.use_ff) r.kl_wf = kl_probe(oracle.W_F, oracle, spec, cfg.kl_eps);
  MarkovSpec smoothed = spec;
  smoothed.pi_b = smoothed_bigram(spec, cfg.kl_eps);
  r.smoothed_entropy_rate = bigram_entropy_rate(smoothed);
  return r;
}

OracleReport oracle_model_eval(const MarkovSpec& spec, const TriggerConfig& trig, const Geometry& g,
                               const OracleConfig& cfg, int n_batches, int batch_size, const RngStream& stream) {
  const ModelParams base = init_params(g.d, spec.N, g.T, TrainableInit::Zeros, true, stream.child("params"),
                                       g.attn_scale);
  const TargetMatrices targets =
      build_target_memories(base, trig, spec, cfg.exclude_triggers_from_wf, cfg.kl_eps, cfg.wk2_support);
  return evaluate_oracle(install_oracle(base, targets, cfg), spec, trig, cfg, n_batches, batch_size,
                         stream.child("eval"));
}

FactoredReport factored_memory_report(const Matrix& X, const Matrix& Y, int d_prime, const RngStream& stream,
                                      int n_stored) {
  const Index d = X.rows();
  if (Y.rows() != d || Y.cols() != X.cols()) throw std::invalid_argument("factored_memory_report: shape mismatch");
  if (d_prime < 1 || d_prime > d) throw std::invalid_argument("factored_memory_report: need 1 <= d' <= d");
  const Index n = X.cols();
  const Index stored = n_stored < 0 ? n : std::min<Index>(n_stored, n);
  const Matrix U0 = gaussian_matrix(d, d_prime, 1.0 / static_cast<double>(d), stream.child("U0"));
  const Matrix V0 = gaussian_matrix(d_prime, d, 1.0 / static_cast<double>(d), stream.child("V0"));
  Matrix U = U0;
  Matrix V = V0;
  if (stored > 0) {
    const auto Xs = X.leftCols(stored);
    const auto Ys = Y.leftCols(stored);
    U.noalias() += Ys * (V0 * Xs).transpose();
    V.noalias() += (U0.transpose() * Ys) * Xs.transpose();
  }
  const double scale = static_cast<double>(d) / (2.0 * d_prime);
  FactoredReport r;
  r.scores = scale * (Y.transpose() * U) * (V * X);
  if (n == 0) return r;
  const Vector diag = r.scores.diagonal();
  r.diag_mean = diag.mean();
  r.diag_min = diag.minCoeff();
  r.diag_max = diag.maxCoeff();
  double off_sum = 0.0;
  for (Index k = 0; k < n; ++k)
    for (Index l = 0; l < n; ++l) {
      if (k == l) continue;
      const double a = std::abs(r.scores(k, l));
      off_sum += a;
      r.offdiag_max_abs = std::max(r.offdiag_max_abs, a);
    }
  if (n > 1) r.offdiag_mean_abs = off_sum / static_cast<double>(n * (n - 1));
  return r;
}

}  // namespace bil
