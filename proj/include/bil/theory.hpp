#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "bil/datagen.hpp"
#include "bil/grad.hpp"
#include "bil/model.hpp"
#include "bil/probes.hpp"

// Population-gradient results for the simplified model. All bilinear forms
// follow the model's score convention query^T W key.
namespace bil {

// ---------------------------------------------------------------------------
// Single linear readout

/// Exact sum_k E_z[(phat_W(k|z) - p(k|z)) w_U(k) w_E(z)^T], where joint(z, y)
/// is the probability of input token z with label y and
/// phat_W = softmax(W_U W w_E(z)). Throws unless joint is a distribution.
Matrix lemma1_gradient_exact(const Matrix& W, const Matrix& joint, const Matrix& W_E, const Matrix& W_U);

/// Every (z, y) cell of the joint table as a weighted example.
std::vector<ReadoutExample> joint_examples(const Matrix& joint);

struct IllustrativeReport {
  Matrix W1;
  double accuracy = 0.0;           // argmax over all (y, t)
  double true_score_mean = 0.0;    // mean over (y, t) of w_U(y)^T W1 (w_E(y) + p_t)
  double wrong_score_abs_mean = 0.0;
  double positional_abs_mean = 0.0;  // mean over (k, t) of |w_U(k)^T W1 p_t|
  double positional_abs_max = 0.0;
};

/// W1 = (eta/N) sum_k w_U(k) (w_E(k) - mean_j w_E(j))^T, the population step
/// from zero for inputs w_E(y) + p_t with y and t uniform.
IllustrativeReport illustrative_one_step_w1(double eta, int N, int T, int d, const RngStream& stream);

// ---------------------------------------------------------------------------
// Moments for the second-layer output matrix

enum class Featurizer {
  TokenAverage,     // (1/t) sum_{s<=t} W_V2 w_E(z_s)
  ResidualAverage,  // W_V2 times the mean of the first-layer residual stream under uniform attention
};

/// Feature of position `pos` of a sequence.
using CustomFeaturizer = std::function<Vector(const TaggedSequence&, int pos)>;

/// Class-conditional sums of features at in-context positions, with label
/// z_{pos+1}.
struct PopulationEstimate {
  Matrix sums;    // dim x N
  Vector counts;  // N
  Vector total;   // dim
  long samples = 0;
  int n_batches = 0;
  int batch_size = 0;
  double tau_hat = 0.0;  // mean over sequences of sum_{t >= t_o} 1/t (1-based)
  long tau_sequences = 0;

  [[nodiscard]] bool observed(int k) const { return counts(k) > 0; }
  [[nodiscard]] int observed_count() const;
  [[nodiscard]] Vector mu(int k) const;
  [[nodiscard]] Vector mu_bar() const;
};

PopulationEstimate estimate_moments(const ModelParams& params, const SequenceSampler& sampler, Featurizer featurizer,
                                    int n_batches, int batch_size, const RngStream& stream);
PopulationEstimate estimate_moments(const SequenceSampler& sampler, const CustomFeaturizer& featurizer, int dim,
                                    int T, int n_batches, int batch_size, const RngStream& stream);

/// Bilinear score table S(k, j) = a_k^T W b_j with summary statistics.
struct ScoreTable {
  Matrix scores;
  double diag_mean = 0.0;
  double offdiag_mean = 0.0;      // signed mean over k != j
  double offdiag_abs_mean = 0.0;
  double offdiag_abs_max = 0.0;
};

ScoreTable score_table(const Matrix& left, const Matrix& W, const Matrix& right);

struct OneStepReport {
  Matrix W;
  ScoreTable primary;    // w_U(k)^T W W_V2 w_E(j)
  ScoreTable secondary;  // w_U(k)^T W W_V2 phi1 w_E(j)
  double recall = 0.0;   // over observed classes against the copy memory
  int observed_classes = 0;
  double tau_hat = 0.0;
};

/// W = (eta/N) sum_{observed k} w_U(k) (mu_k - mu_bar)^T.
OneStepReport one_step_wo2(double eta, const ModelParams& params, const PopulationEstimate& moments);

/// R1 = fraction of observed classes k with
/// k = argmax_k' (W_V2 w_E(k'))^T (mu_k - mu_bar), lowest id on ties.
double r1_from_moments(const ModelParams& params, const PopulationEstimate& moments);

/// R1 with exact population means, mu_k - mu_bar proportional to
/// W_V2 (w_E(k) - mean_j w_E(j)).
double r1_population(const ModelParams& params);

struct R1Setup {
  int d = 256;
  int T = 256;
  int batch_size = 32;
  int n_batches = 64;
};

/// Fresh frozen matrices from the "params" substream and moments from the
/// "data" substream; batch b always uses data substream b, so smaller
/// n_batches values see a prefix of the same data.
double r1_recall(const MarkovSpec& spec, const TriggerConfig& trig, const R1Setup& setup, const RngStream& stream);

// ---------------------------------------------------------------------------
// Sequences ending at the second occurrence of a single trigger

/// Draws from the sequence law conditioned on the last token being the
/// second occurrence of the (single) trigger. Tokens are generated in order
/// and a draw is abandoned as soon as the trigger occurs twice early; the
/// final token is accepted with its transition probability. Throws
/// DistributionSupportError after max_tries failed draws.
TaggedSequence sample_second_occurrence(const SequenceSampler& sampler, int T, const RngStream& stream,
                                        int max_tries = 10000);
std::vector<TaggedSequence> sample_theory_batch(const SequenceSampler& sampler, int T, long n,
                                                const RngStream& stream);

/// Label of a theory sequence: the output paired with its trigger.
int theory_label(const TaggedSequence& seq);

// ---------------------------------------------------------------------------
// Second attention layer with restricted inputs: queries and values are
// x_{t,0} = w_E(z_t) + p_t, keys are x_{t,1} = (1/t) sum_{s<=t} phi1 x_{s,0}.
// The last position queries every position; logits W_U phi2 sum_t a_t x_{t,0}.

double restricted_layer2_loss(const ModelParams& params, const Matrix& W, std::span<const TaggedSequence> seqs);

struct RestrictedGradient {
  double loss = 0.0;
  Matrix grad;
};

/// Backpropagation through the restricted layer at an arbitrary W.
RestrictedGradient restricted_layer2_backward(const ModelParams& params, const Matrix& W,
                                              std::span<const TaggedSequence> seqs);

/// Closed form at W = 0:
///   c sum_k E[(phat_k - 1{y=k}) (1/T) sum_t w_U(k)^T phi2 x_{t,0} x_{T,0} (x_{t,1} - xbar_1)^T].
Matrix lemma3_closed_form(const ModelParams& params, std::span<const TaggedSequence> seqs);

struct Lemma3Report {
  Matrix gradient;           // closed form
  Matrix backward_gradient;  // restricted backward at W = 0
  double max_abs_diff = 0.0;
  ScoreTable step_scores;    // w_E(j)^T (-gradient) phi1 w_E(i)
};

/// Requires params.W_K2 == 0; throws std::invalid_argument otherwise.
Lemma3Report lemma3_gradient_wk2(const ModelParams& params, std::span<const TaggedSequence> seqs);

// ---------------------------------------------------------------------------
// First attention layer on positions only, token-only values, and the
// second layer replaced by the linearized softmax
//   sbar_t = (1/T)(1 + u_t - mean_s u_s),  u_t = c x_T^T W_K2 z_t(W),
//   z_t(W) = sum_{s<=t} softmax_s(c p_t^T W p_s) phi1 w_E(z_s).

double linearized_loss(const ModelParams& params, const Matrix& W, std::span<const TaggedSequence> seqs);

/// Closed form at W = 0, term by term:
///   c E[sum_k (phat_k - 1{y=k}) (1/T) sum_t (a_k(t) - a_k(xbar)) p_t r_t^T]
/// with a_k(v) = w_U(k)^T phi2 v and r_t = (1/t) sum_{s<=t} beta_s (p_s - pbar_{1:t}).
Matrix lemma4_closed_form(const ModelParams& params, std::span<const TaggedSequence> seqs);

/// Same gradient accumulated as c P Omega P^T.
Matrix lemma4_gradient_fast(const ModelParams& params, std::span<const TaggedSequence> seqs);

struct Lemma4Report {
  Matrix gradient;
  std::optional<double> fd_max_rel_err;
  double previous_token_fraction = 0.0;  // queries t in [3, T-1] (1-based) whose best causal key is t-1
};

/// Requires params.W_K1 == 0. With fd_coords > 0, compares the closed form
/// with central differences of linearized_loss at that many coordinates.
Lemma4Report lemma4_gradient_wk1(const ModelParams& params, std::span<const TaggedSequence> seqs, int fd_coords = 0,
                                 const RngStream& stream = RngStream(0));

/// Fraction of queries t in [3, T-1] (1-based) with argmax_{s<=t} p_t^T W p_s = t-1.
double previous_token_fraction(const Matrix& W, const Matrix& P);

// ---------------------------------------------------------------------------
// Output-matrix gradient as a noisy associative memory

struct Lemma2Report {
  Matrix formula;   // sum_k p(y=k) w_U(k) (muhat_k - mu_k)^T on the empirical distribution
  Matrix backward;  // W_O2 gradient from backward()
  double max_abs_diff = 0.0;
};

/// Requires W_K1 = W_K2 = 0 and W_F = 0 (or absent).
Lemma2Report lemma2_check(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode);

// ---------------------------------------------------------------------------
// Three sequential gradient steps

struct CurriculumConfig {
  int d = 512;
  int N = 50;
  int T = 32;
  double eta_o2 = 1.0;
  double eta_k2 = 1.0;
  double eta_k1 = 1.0;
  long samples_per_step = 100000;
  double beta = 20.0;
  bool reversed = false;  // W_K2, then W_O2, then W_K1
  int eval_batches = 20;
  int eval_batch_size = 64;
  std::uint64_t seed = 0;
};

struct CurriculumStep {
  std::string matrix;
  long samples = 0;
  double recall = 0.0;
  ScoreTable scores;
};

struct CurriculumReport {
  std::vector<CurriculumStep> steps;
  double recall_wo2 = 0.0, recall_wk2 = 0.0, recall_wk1 = 0.0;
  double previous_token_fraction = 0.0;
  double tau_hat = 0.0;
  LossMetrics eval;
  ModelParams installed;
};

/// Runs the three one-step estimates on fresh second-occurrence sequences,
/// rescales each matrix so that its target associations score 1 on average
/// (key matrices then multiplied by beta), installs them in a model without
/// feed-forward layer and evaluates on ordinary sequences.
CurriculumReport three_step_curriculum(const CurriculumConfig& cfg);

}  // namespace bil
