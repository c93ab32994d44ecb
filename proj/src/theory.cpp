#include "bil/theory.hpp"

#include <cmath>
#include <iterator>
#include <limits>
#include <stdexcept>

#include "bil/embeddings.hpp"
#include "bil/parallel.hpp"

namespace bil {

namespace {

void require_distribution(const Matrix& joint) {
  if ((joint.array() < 0.0).any() || !joint.allFinite())
    throw std::invalid_argument("joint distribution has negative or non-finite entries");
  if (std::abs(joint.sum() - 1.0) > 1e-12) throw std::invalid_argument("joint distribution does not sum to 1");
}

Vector softmax(const Eigen::Ref<const Vector>& v) { return log_softmax(v).array().exp(); }

}  // namespace

// ---------------------------------------------------------------------------

Matrix lemma1_gradient_exact(const Matrix& W, const Matrix& joint, const Matrix& W_E, const Matrix& W_U) {
  require_distribution(joint);
  if (joint.rows() != W_E.cols() || joint.cols() != W_U.rows())
    throw std::invalid_argument("lemma1_gradient_exact: joint table does not match the embeddings");
  const Matrix logits = W_U * W * W_E;
  Matrix G = Matrix::Zero(W.rows(), W.cols());
  for (Index z = 0; z < joint.rows(); ++z) {
    const double pz = joint.row(z).sum();
    if (pz == 0.0) continue;
    const Vector phat = softmax(logits.col(z));
    for (Index k = 0; k < joint.cols(); ++k) {
      const double coef = pz * (phat(k) - joint(z, k) / pz);
      G.noalias() += coef * W_U.row(k).transpose() * W_E.col(z).transpose();
    }
  }
  return G;
}

std::vector<ReadoutExample> joint_examples(const Matrix& joint) {
  require_distribution(joint);
  std::vector<ReadoutExample> out;
  for (Index z = 0; z < joint.rows(); ++z)
    for (Index y = 0; y < joint.cols(); ++y)
      out.push_back({static_cast<int>(z), static_cast<int>(y), joint(z, y)});
  return out;
}

IllustrativeReport illustrative_one_step_w1(double eta, int N, int T, int d, const RngStream& stream) {
  if (!(eta > 0.0) || N < 2 || T < 1 || d < 1) throw std::invalid_argument("illustrative_one_step_w1: bad arguments");
  const double var = 1.0 / d;
  const Matrix W_E = gaussian_matrix(d, N, var, stream.child("W_E"));
  const Matrix W_U = gaussian_matrix(d, N, var, stream.child("W_U")).transpose();
  const Matrix P = gaussian_matrix(d, T, var, stream.child("P"));
  const Vector wbar = W_E.rowwise().mean();
  IllustrativeReport r;
  r.W1 = (eta / N) * W_U.transpose() * (W_E.colwise() - wbar).transpose();

  const Matrix tok = W_U * r.W1 * W_E;  // N x N, column y
  const Matrix pos = W_U * r.W1 * P;    // N x T, column t
  long correct = 0;
  double true_sum = 0.0, wrong_sum = 0.0;
  for (int y = 0; y < N; ++y)
    for (int t = 0; t < T; ++t) {
      const Vector s = tok.col(y) + pos.col(t);
      correct += argmax_lowest(s) == y;
      true_sum += s(y);
      wrong_sum += s.cwiseAbs().sum() - std::abs(s(y));
    }
  const double cells = static_cast<double>(N) * T;
  r.accuracy = correct / cells;
  r.true_score_mean = true_sum / cells;
  r.wrong_score_abs_mean = wrong_sum / (cells * (N - 1));
  r.positional_abs_mean = pos.cwiseAbs().mean();
  r.positional_abs_max = pos.cwiseAbs().maxCoeff();
  return r;
}

// ---------------------------------------------------------------------------

int PopulationEstimate::observed_count() const { return static_cast<int>((counts.array() > 0).count()); }

Vector PopulationEstimate::mu(int k) const {
  if (!observed(k)) throw std::invalid_argument("PopulationEstimate::mu: class never observed");
  return sums.col(k) / counts(k);
}

Vector PopulationEstimate::mu_bar() const {
  if (samples == 0) throw std::invalid_argument("PopulationEstimate::mu_bar: no samples");
  return total / static_cast<double>(samples);
}

namespace {

double tau_of(const TaggedSequence& seq) {
  if (seq.first_output_pos < 0) return std::numeric_limits<double>::quiet_NaN();
  double tau = 0.0;
  for (int t = seq.first_output_pos + 1; t <= seq.length(); ++t) tau += 1.0 / t;
  return tau;
}

// Counts-space accumulation for the token-average feature: the feature at
// position i is W_V2 W_E c_i with c_i the normalized token histogram of the
// prefix, so sums are kept in R^N and mapped once at the end.
struct HistogramMoments {
  Matrix sums;  // N x N
  Vector counts;
  Vector total;
  long samples = 0;
  double tau_sum = 0.0;
  long tau_sequences = 0;
};

HistogramMoments histogram_moments(const SequenceSampler& sampler, int T, int n_batches, int batch_size,
                                   const RngStream& stream) {
  const int N = sampler.spec().N;
  HistogramMoments h;
  h.sums = Matrix::Zero(N, N);
  h.counts = Vector::Zero(N);
  h.total = Vector::Zero(N);
  Vector hist(N);
  for (int b = 0; b < n_batches; ++b) {
    const auto batch = sampler.sample_batch(T, batch_size, stream.child(static_cast<std::uint64_t>(b)));
    for (const auto& seq : batch) {
      hist.setZero();
      for (int i = 0; i < seq.length(); ++i) {
        hist(seq.tokens[i]) += 1.0;
        if (!seq.in_context(i)) continue;
        const int y = seq.tokens[i + 1];
        h.sums.col(y) += hist / (i + 1.0);
        h.total += hist / (i + 1.0);
        h.counts(y) += 1.0;
        ++h.samples;
      }
      const double tau = tau_of(seq);
      if (!std::isnan(tau)) {
        h.tau_sum += tau;
        ++h.tau_sequences;
      }
    }
  }
  return h;
}

}  // namespace

PopulationEstimate estimate_moments(const ModelParams& params, const SequenceSampler& sampler, Featurizer featurizer,
                                    int n_batches, int batch_size, const RngStream& stream) {
  if (n_batches < 0 || batch_size < 1) throw std::invalid_argument("estimate_moments: bad batch counts");
  if (sampler.spec().N != params.N) throw std::invalid_argument("estimate_moments: vocabulary mismatch");
  if (featurizer == Featurizer::TokenAverage) {
    const auto h = histogram_moments(sampler, params.T, n_batches, batch_size, stream);
    const Matrix values = params.W_V2 * params.W_E;
    PopulationEstimate est;
    est.sums = values * h.sums;
    est.counts = h.counts;
    est.total = values * h.total;
    est.samples = h.samples;
    est.n_batches = n_batches;
    est.batch_size = batch_size;
    est.tau_sequences = h.tau_sequences;
    est.tau_hat = h.tau_sequences ? h.tau_sum / h.tau_sequences : 0.0;
    return est;
  }
  const Matrix phi1_E = params.phi1() * params.W_E;
  const Matrix phi1_P = params.phi1() * params.P;
  // Residual stream after a uniform first layer, then W_V2 applied to its
  // running mean.
  CustomFeaturizer residual = [&](const TaggedSequence& seq, int pos) -> Vector {
    Vector layer_sum = Vector::Zero(params.d);
    Vector stream_sum = Vector::Zero(params.d);
    for (int s = 0; s <= pos; ++s) {
      const int z = seq.tokens[s];
      layer_sum += phi1_E.col(z) + phi1_P.col(s);
      stream_sum += params.W_E.col(z) + params.P.col(s) + layer_sum / (s + 1.0);
    }
    return params.W_V2 * (stream_sum / (pos + 1.0));
  };
  return estimate_moments(sampler, residual, params.d, params.T, n_batches, batch_size, stream);
}

PopulationEstimate estimate_moments(const SequenceSampler& sampler, const CustomFeaturizer& featurizer, int dim,
                                    int T, int n_batches, int batch_size, const RngStream& stream) {
  if (n_batches < 0 || batch_size < 1 || dim < 1) throw std::invalid_argument("estimate_moments: bad arguments");
  const int N = sampler.spec().N;
  PopulationEstimate est;
  est.sums = Matrix::Zero(dim, N);
  est.counts = Vector::Zero(N);
  est.total = Vector::Zero(dim);
  est.n_batches = n_batches;
  est.batch_size = batch_size;
  double tau_sum = 0.0;
  for (int b = 0; b < n_batches; ++b) {
    const auto batch = sampler.sample_batch(T, batch_size, stream.child(static_cast<std::uint64_t>(b)));
    for (const auto& seq : batch) {
      for (int i = 0; i < seq.length(); ++i) {
        if (!seq.in_context(i)) continue;
        const Vector x = featurizer(seq, i);
        const int y = seq.tokens[i + 1];
        est.sums.col(y) += x;
        est.total += x;
        est.counts(y) += 1.0;
        ++est.samples;
      }
      const double tau = tau_of(seq);
      if (!std::isnan(tau)) {
        tau_sum += tau;
        ++est.tau_sequences;
      }
    }
  }
  est.tau_hat = est.tau_sequences ? tau_sum / est.tau_sequences : 0.0;
  return est;
}

ScoreTable score_table(const Matrix& left, const Matrix& W, const Matrix& right) {
  ScoreTable t;
  t.scores = left.transpose() * W * right;
  const Index n = std::min(t.scores.rows(), t.scores.cols());
  if (n == 0) return t;
  t.diag_mean = t.scores.diagonal().head(n).mean();
  double sum = 0.0, abs_sum = 0.0;
  long cells = 0;
  for (Index k = 0; k < t.scores.rows(); ++k)
    for (Index j = 0; j < t.scores.cols(); ++j) {
      if (k == j) continue;
      const double v = t.scores(k, j);
      sum += v;
      abs_sum += std::abs(v);
      t.offdiag_abs_max = std::max(t.offdiag_abs_max, std::abs(v));
      ++cells;
    }
  if (cells) {
    t.offdiag_mean = sum / cells;
    t.offdiag_abs_mean = abs_sum / cells;
  }
  return t;
}

OneStepReport one_step_wo2(double eta, const ModelParams& params, const PopulationEstimate& m) {
  if (m.sums.rows() != params.d || m.sums.cols() != params.N)
    throw std::invalid_argument("one_step_wo2: moments do not match the model");
  OneStepReport r;
  r.W = Matrix::Zero(params.d, params.d);
  r.tau_hat = m.tau_hat;
  r.observed_classes = m.observed_count();
  if (m.samples == 0) return r;
  const Vector mbar = m.mu_bar();
  for (int k = 0; k < params.N; ++k)
    if (m.observed(k)) r.W.noalias() += params.W_U.row(k).transpose() * (m.mu(k) - mbar).transpose();
  r.W *= eta / params.N;

  const Matrix outputs = params.W_U.transpose();
  const Matrix values = params.W_V2 * params.W_E;
  r.primary = score_table(outputs, r.W, values);
  r.secondary = score_table(outputs, r.W, params.W_V2 * params.phi1() * params.W_E);
  long hits = 0;
  for (int k = 0; k < params.N; ++k)
    if (m.observed(k)) hits += argmax_lowest(r.primary.scores.col(k)) == k;
  r.recall = r.observed_classes ? static_cast<double>(hits) / r.observed_classes : 0.0;
  return r;
}

double r1_from_moments(const ModelParams& params, const PopulationEstimate& m) {
  if (m.samples == 0 || m.observed_count() == 0) return 0.0;
  const Matrix values = params.W_V2 * params.W_E;
  const Vector mbar = m.mu_bar();
  long hits = 0;
  for (int k = 0; k < params.N; ++k) {
    if (!m.observed(k)) continue;
    const Vector s = values.transpose() * (m.mu(k) - mbar);
    hits += argmax_lowest(s) == k;
  }
  return static_cast<double>(hits) / m.observed_count();
}

double r1_population(const ModelParams& params) {
  const Matrix values = params.W_V2 * params.W_E;
  const Vector wbar = params.W_E.rowwise().mean();
  const Matrix dirs = params.W_V2 * (params.W_E.colwise() - wbar);
  const Matrix s = values.transpose() * dirs;
  long hits = 0;
  for (int k = 0; k < params.N; ++k) hits += argmax_lowest(s.col(k)) == k;
  return static_cast<double>(hits) / params.N;
}

double r1_recall(const MarkovSpec& spec, const TriggerConfig& trig, const R1Setup& s, const RngStream& stream) {
  const ModelParams params = init_params(s.d, spec.N, s.T, TrainableInit::Zeros, false, stream.child("params"));
  const SequenceSampler sampler(spec, trig);
  const auto m = estimate_moments(params, sampler, Featurizer::TokenAverage, s.n_batches, s.batch_size,
                                  stream.child("data"));
  return r1_from_moments(params, m);
}

// ---------------------------------------------------------------------------

TaggedSequence sample_second_occurrence(const SequenceSampler& sampler, int T, const RngStream& stream,
                                        int max_tries) {
  if (T < 2) throw std::invalid_argument("sample_second_occurrence: T must be at least 2");
  const MarkovSpec& spec = sampler.spec();
  const TriggerConfig& cfg = sampler.config();
  if (cfg.K != 1) throw std::invalid_argument("sample_second_occurrence: exactly one trigger is required");
  auto engine = stream.engine();
  std::discrete_distribution<int> dist;
  std::uniform_int_distribution<int> uniform(0, spec.N - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  using Param = std::discrete_distribution<int>::param_type;
  const Param unigram(spec.pi_u.data(), spec.pi_u.data() + spec.N);
  std::vector<Param> rows;
  rows.reserve(spec.N);
  for (int i = 0; i < spec.N; ++i) {
    const Vector r = spec.pi_b.row(i).transpose();
    rows.emplace_back(r.data(), r.data() + spec.N);
  }
  const Vector& pq = cfg.pi_q.size() ? cfg.pi_q : spec.pi_u;
  const Param trigger_law(pq.data(), pq.data() + spec.N);

  TaggedSequence seq;
  seq.tokens.resize(T);
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    const int q = cfg.mode == TriggerMode::Fixed ? cfg.fixed_set[0] : dist(engine, trigger_law);
    const int o = cfg.output_mode == OutputMode::Uniform ? uniform(engine) : dist(engine, rows[q]);
    int seen = 0;
    bool alive = true;
    for (int t = 0; t + 1 < T && alive; ++t) {
      int z;
      if (t == 0)
        z = dist(engine, unigram);
      else
        z = seq.tokens[t - 1] == q ? o : dist(engine, rows[seq.tokens[t - 1]]);
      seq.tokens[t] = z;
      if (z == q && ++seen > 1) alive = false;
    }
    if (!alive || seen != 1) continue;
    const int prev = seq.tokens[T - 2];
    const double p_last = prev == q ? (o == q ? 1.0 : 0.0) : spec.pi_b(prev, q);
    if (unit(engine) >= p_last) continue;
    seq.tokens[T - 1] = q;
    seq.triggers = {q};
    seq.outputs = {o};
    annotate(seq);
    return seq;
  }
  throw DistributionSupportError("sample_second_occurrence: no accepted sequence after " +
                                 std::to_string(max_tries) + " tries");
}

std::vector<TaggedSequence> sample_theory_batch(const SequenceSampler& sampler, int T, long n,
                                                const RngStream& stream) {
  if (n < 0) throw std::invalid_argument("sample_theory_batch: negative count");
  std::vector<TaggedSequence> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), [&](std::size_t i) {
    out[i] = sample_second_occurrence(sampler, T, stream.child(static_cast<std::uint64_t>(i)));
  });
  return out;
}

int theory_label(const TaggedSequence& seq) {
  if (seq.outputs.empty()) throw std::invalid_argument("theory_label: sequence has no trigger");
  return seq.outputs[0];
}

// ---------------------------------------------------------------------------

namespace {

// Token and position tables of the restricted second layer.
struct RestrictedTables {
  Matrix phi1_E, phi1_P;        // d x N, d x T
  Matrix readout_E, readout_P;  // W_U phi2 W_E (N x N), W_U phi2 P (N x T)

  explicit RestrictedTables(const ModelParams& p) {
    const Matrix phi1 = p.phi1();
    phi1_E = phi1 * p.W_E;
    phi1_P = phi1 * p.P;
    const Matrix readout = p.W_U * p.phi2();
    readout_E = readout * p.W_E;
    readout_P = readout * p.P;
  }
};

struct SequenceView {
  Vector query;  // x_{T,0}
  Matrix x1;     // d x T
  Matrix a;      // N x T, a(k, t) = w_U(k)^T phi2 x_{t,0}
};

SequenceView restricted_view(const ModelParams& p, const RestrictedTables& tb, const TaggedSequence& seq) {
  const int T = seq.length();
  if (T > p.T) throw std::invalid_argument("sequence longer than the positional table");
  SequenceView v;
  v.query = p.W_E.col(seq.tokens[T - 1]) + p.P.col(T - 1);
  v.x1.resize(p.d, T);
  v.a.resize(p.N, T);
  Vector run = Vector::Zero(p.d);
  for (int t = 0; t < T; ++t) {
    run += tb.phi1_E.col(seq.tokens[t]) + tb.phi1_P.col(t);
    v.x1.col(t) = run / (t + 1.0);
    v.a.col(t) = tb.readout_E.col(seq.tokens[t]) + tb.readout_P.col(t);
  }
  return v;
}

void require_nonempty(std::span<const TaggedSequence> seqs) {
  if (seqs.empty()) throw std::invalid_argument("theory gradient: no sequences");
}

constexpr std::size_t kOuterChunk = 512;

// sum_i left_i right_i^T over all sequences, built chunk by chunk as a
// matrix product; fill(seq, left, right) writes one column pair.
template <class Fill>
Matrix outer_sum(int d, std::span<const TaggedSequence> seqs, Fill fill) {
  Matrix G = Matrix::Zero(d, d);
  Matrix L(d, static_cast<Index>(std::min(kOuterChunk, seqs.size())));
  Matrix R(L.rows(), L.cols());
  for (std::size_t lo = 0; lo < seqs.size(); lo += kOuterChunk) {
    const std::size_t n = std::min(kOuterChunk, seqs.size() - lo);
    for (std::size_t i = 0; i < n; ++i) {
      Vector l, r;
      fill(seqs[lo + i], l, r);
      L.col(static_cast<Index>(i)) = l;
      R.col(static_cast<Index>(i)) = r;
    }
    const auto cols = static_cast<Index>(n);
    G.noalias() += L.leftCols(cols) * R.leftCols(cols).transpose();
  }
  return G;
}

}  // namespace

RestrictedGradient restricted_layer2_backward(const ModelParams& p, const Matrix& W,
                                              std::span<const TaggedSequence> seqs) {
  require_nonempty(seqs);
  const RestrictedTables tb(p);
  const double c = p.attn_scale;
  RestrictedGradient r;
  r.grad = outer_sum(p.d, seqs, [&](const TaggedSequence& seq, Vector& left, Vector& right) {
    const SequenceView v = restricted_view(p, tb, seq);
    const Vector u = c * (v.x1.transpose() * (W.transpose() * v.query));
    const Vector attn = softmax(u);
    const Vector logp = log_softmax(v.a * attn);
    const int y = theory_label(seq);
    r.loss -= logp(y);
    Vector delta = logp.array().exp();
    delta(y) -= 1.0;
    const Vector g = v.a.transpose() * delta;
    const Vector du = attn.array() * (g.array() - attn.dot(g));
    left = v.query;
    right = v.x1 * du;
  });
  const double n = static_cast<double>(seqs.size());
  r.loss /= n;
  r.grad *= c / n;
  return r;
}

double restricted_layer2_loss(const ModelParams& p, const Matrix& W, std::span<const TaggedSequence> seqs) {
  require_nonempty(seqs);
  const RestrictedTables tb(p);
  double loss = 0.0;
  for (const auto& seq : seqs) {
    const SequenceView v = restricted_view(p, tb, seq);
    const Vector u = p.attn_scale * (v.x1.transpose() * (W.transpose() * v.query));
    loss -= log_softmax(v.a * softmax(u))(theory_label(seq));
  }
  return loss / static_cast<double>(seqs.size());
}

Matrix lemma3_closed_form(const ModelParams& p, std::span<const TaggedSequence> seqs) {
  require_nonempty(seqs);
  const RestrictedTables tb(p);
  Matrix G = outer_sum(p.d, seqs, [&](const TaggedSequence& seq, Vector& left, Vector& right) {
    const SequenceView v = restricted_view(p, tb, seq);
    const auto T = static_cast<double>(seq.length());
    Vector coef = softmax(v.a.rowwise().mean());
    coef(theory_label(seq)) -= 1.0;
    const Vector x1bar = v.x1.rowwise().mean();
    left = v.query;
    right = ((v.x1.colwise() - x1bar) * (v.a.transpose() * coef)) / T;
  });
  return p.attn_scale * G / static_cast<double>(seqs.size());
}

Lemma3Report lemma3_gradient_wk2(const ModelParams& p, std::span<const TaggedSequence> seqs) {
  if (!p.W_K2.isZero(0.0)) throw std::invalid_argument("lemma3_gradient_wk2: W_K2 must be zero");
  Lemma3Report r;
  r.gradient = lemma3_closed_form(p, seqs);
  r.backward_gradient = restricted_layer2_backward(p, p.W_K2, seqs).grad;
  r.max_abs_diff = (r.gradient - r.backward_gradient).cwiseAbs().maxCoeff();
  r.step_scores = score_table(p.W_E, -r.gradient, p.phi1() * p.W_E);
  return r;
}

// ---------------------------------------------------------------------------

double linearized_loss(const ModelParams& p, const Matrix& W, std::span<const TaggedSequence> seqs) {
  require_nonempty(seqs);
  const double c = p.attn_scale;
  const Matrix phi1_E = p.phi1() * p.W_E;
  const Matrix readout_E = p.W_U * p.phi2() * p.W_E;
  double loss = 0.0;
  for (const auto& seq : seqs) {
    const int T = seq.length();
    if (T > p.T) throw std::invalid_argument("sequence longer than the positional table");
    Matrix scores = c * (p.P.leftCols(T).transpose() * W * p.P.leftCols(T));
    causal_softmax_inplace(scores);
    Matrix values(p.d, T);
    for (int s = 0; s < T; ++s) values.col(s) = phi1_E.col(seq.tokens[s]);
    const Matrix z = values * scores.transpose();
    const Vector query = p.W_E.col(seq.tokens[T - 1]);
    const Vector u = c * (z.transpose() * (p.W_K2.transpose() * query));
    const Vector sbar = (1.0 + (u.array() - u.mean())) / T;
    Vector logits = Vector::Zero(p.N);
    for (int t = 0; t < T; ++t) logits += sbar(t) * readout_E.col(seq.tokens[t]);
    loss -= log_softmax(logits)(theory_label(seq));
  }
  return loss / static_cast<double>(seqs.size());
}

namespace {

// Linearized model at W = 0.
struct LinearizedState {
  Matrix a;      // N x T, a(k, t) = w_U(k)^T phi2 w_E(z_t)
  Vector beta;   // beta_s = c x_T^T W_K2 phi1 w_E(z_s)
  Vector delta;  // phat - e_y
};

struct LinearizedTables {
  Matrix readout_E;  // N x N
  Matrix R;          // R(j, i) = w_E(j)^T W_K2 phi1 w_E(i)

  explicit LinearizedTables(const ModelParams& p)
      : readout_E(p.W_U * p.phi2() * p.W_E), R(p.W_E.transpose() * p.W_K2 * p.phi1() * p.W_E) {}
};

LinearizedState linearized_state(const ModelParams& p, const LinearizedTables& tb, const TaggedSequence& seq) {
  const int T = seq.length();
  if (T > p.T) throw std::invalid_argument("sequence longer than the positional table");
  LinearizedState st;
  st.a.resize(p.N, T);
  st.beta.resize(T);
  const int zT = seq.tokens[T - 1];
  for (int t = 0; t < T; ++t) {
    st.a.col(t) = tb.readout_E.col(seq.tokens[t]);
    st.beta(t) = p.attn_scale * tb.R(zT, seq.tokens[t]);
  }
  Vector u(T);
  double run = 0.0;
  for (int t = 0; t < T; ++t) {
    run += st.beta(t);
    u(t) = run / (t + 1.0);
  }
  const Vector sbar = (1.0 + (u.array() - u.mean())) / T;
  st.delta = softmax(st.a * sbar);
  st.delta(theory_label(seq)) -= 1.0;
  return st;
}

}  // namespace

Matrix lemma4_closed_form(const ModelParams& p, std::span<const TaggedSequence> seqs) {
  require_nonempty(seqs);
  const LinearizedTables tb(p);
  Matrix G = Matrix::Zero(p.d, p.d);
  for (const auto& seq : seqs) {
    const int T = seq.length();
    const LinearizedState st = linearized_state(p, tb, seq);
    // r_t = (1/t) sum_{s<=t} beta_s (p_s - pbar_{1:t})
    Matrix r(p.d, T);
    Vector weighted = Vector::Zero(p.d), plain = Vector::Zero(p.d);
    double beta_sum = 0.0;
    for (int t = 0; t < T; ++t) {
      weighted += st.beta(t) * p.P.col(t);
      plain += p.P.col(t);
      beta_sum += st.beta(t);
      const double n = t + 1.0;
      r.col(t) = (weighted - beta_sum * plain / n) / n;
    }
    const Vector abar = st.a.rowwise().mean();
    for (int k = 0; k < p.N; ++k) {
      const Vector coef = (st.a.row(k).transpose().array() - abar(k)) * (st.delta(k) / T);
      G.noalias() += p.P.leftCols(T) * coef.asDiagonal() * r.transpose();
    }
  }
  return p.attn_scale * G / static_cast<double>(seqs.size());
}

Matrix lemma4_gradient_fast(const ModelParams& p, std::span<const TaggedSequence> seqs) {
  require_nonempty(seqs);
  const LinearizedTables tb(p);
  int Tmax = 0;
  for (const auto& s : seqs) Tmax = std::max(Tmax, s.length());
  Matrix omega = Matrix::Zero(Tmax, Tmax);
  for (const auto& seq : seqs) {
    const int T = seq.length();
    const LinearizedState st = linearized_state(p, tb, seq);
    const Vector b = st.a.transpose() * st.delta;
    const double bbar = b.mean();
    double run = 0.0;
    for (int t = 0; t < T; ++t) {
      run += st.beta(t);
      const double n = t + 1.0;
      const double coef = (b(t) - bbar) / (T * n);
      const double mean_beta = run / n;
      for (int s = 0; s <= t; ++s) omega(t, s) += coef * (st.beta(s) - mean_beta);
    }
  }
  const auto Pt = p.P.leftCols(Tmax);
  return p.attn_scale * (Pt * omega * Pt.transpose()) / static_cast<double>(seqs.size());
}

double previous_token_fraction(const Matrix& W, const Matrix& P) {
  const Index T = P.cols();
  if (T < 4) return 0.0;
  const Matrix S = P.transpose() * W * P;
  long hits = 0, total = 0;
  for (Index t = 2; t <= T - 2; ++t) {
    Index best = 0;
    for (Index s = 1; s <= t; ++s)
      if (S(t, s) > S(t, best)) best = s;
    hits += best == t - 1;
    ++total;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

Lemma4Report lemma4_gradient_wk1(const ModelParams& p, std::span<const TaggedSequence> seqs, int fd_coords,
                                 const RngStream& stream) {
  if (!p.W_K1.isZero(0.0)) throw std::invalid_argument("lemma4_gradient_wk1: W_K1 must be zero");
  Lemma4Report r;
  r.gradient = lemma4_closed_form(p, seqs);
  if (fd_coords > 0) {
    std::vector<Coordinate> wk1;
    for (const auto& c : sample_coordinates(p, fd_coords, stream))
      if (c.matrix == "W_K1") wk1.push_back(c);
    const auto numeric = finite_diff_gradient(
        [&](const ModelParams& q) { return linearized_loss(q, q.W_K1, seqs); }, p, wk1, 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < wk1.size(); ++i)
      worst = std::max(worst, relative_error(r.gradient(wk1[i].row, wk1[i].col), numeric[i]));
    r.fd_max_rel_err = worst;
  }
  int T = 0;
  for (const auto& s : seqs) T = std::max(T, s.length());
  r.previous_token_fraction = previous_token_fraction(-r.gradient, p.P.leftCols(T));
  return r;
}

// ---------------------------------------------------------------------------

Lemma2Report lemma2_check(const ModelParams& p, std::span<const TaggedSequence> batch, MaskMode mode) {
  if (!p.W_K1.isZero(0.0) || !p.W_K2.isZero(0.0))
    throw std::invalid_argument("lemma2_check: attention must be uniform (zero key matrices)");
  if (p.use_ff && !p.W_F.isZero(0.0)) throw std::invalid_argument("lemma2_check: W_F must be zero");
  Lemma2Report r;
  r.backward = backward(p, batch, mode).grads.W_O2;

  // Empirical distribution over supervised positions with x = W_V2 o2_t:
  // p(y=k) mu_k = mu_sum_k / n and p(y=k) muhat_k = E[phat(k|x) x] = muhat_sum_k / n.
  const PreparedModel prep(p);
  Matrix mu_sum = Matrix::Zero(p.d, p.N);
  Matrix muhat_sum = Matrix::Zero(p.d, p.N);
  long n = 0;
  for (std::size_t lo = 0; lo < batch.size(); lo += kBackwardChunk) {
    const auto chunk = batch.subspan(lo, std::min(kBackwardChunk, batch.size() - lo));
    const BatchTrace bt = forward_batch(prep, token_views(chunk));
    for (int b = 0; b < bt.count; ++b)
      for (int t = 0; t < bt.length; ++t) {
        if (!supervised(chunk[b], t, mode)) continue;
        const Index col = static_cast<Index>(b) * bt.length + t;
        const Vector x = p.W_V2 * bt.o2.col(col);
        mu_sum.col(chunk[b].tokens[t + 1]) += x;
        muhat_sum.noalias() += x * softmax(bt.logits.col(col)).transpose();
        ++n;
      }
  }
  if (n == 0) throw EmptyBatchError("lemma2_check: no supervised position");
  r.formula = p.W_U.transpose() * ((muhat_sum - mu_sum) / static_cast<double>(n)).transpose();
  r.max_abs_diff = (r.formula - r.backward).cwiseAbs().maxCoeff();
  return r;
}

// ---------------------------------------------------------------------------

namespace {

double target_mean(const Matrix& W, const TargetMemory& mem) {
  double s = 0.0;
  for (const auto& pr : mem.pairs) s += pr.v.dot(W * pr.u);
  return s / static_cast<double>(mem.pairs.size());
}

// Rescales W so that its target associations score 1 on average; matrices
// without positive target signal are returned unchanged.
Matrix normalize_to_target(const Matrix& W, const TargetMemory& mem) {
  const double m = target_mean(W, mem);
  if (!(m > 0.0) || !std::isfinite(m)) return W;
  return W / m;
}

// Orthogonal projector onto the column span of B.
Matrix span_projector(const Matrix& B) {
  const Matrix gram = B.transpose() * B;
  return B * gram.ldlt().solve(B.transpose());
}

// Keeps only the token-to-token block of a key-query step: queries restricted
// to span(W_E), keys to span(Phi1 W_E). The dropped positional blocks are
// shared by every sequence of length T and carry no association signal.
Matrix token_block(const ModelParams& p, const Matrix& W) {
  return span_projector(p.W_E) * W * span_projector(p.phi1() * p.W_E);
}

// Token-space moments of x = (1/T) sum_t W_V2 x_{t,0}. Positional terms are
// identical for every sequence of length T and cancel in mu_k - mu_bar.
PopulationEstimate sequence_average_moments(const ModelParams& p, std::span<const TaggedSequence> seqs) {
  Matrix sums = Matrix::Zero(p.N, p.N);
  Vector total = Vector::Zero(p.N);
  PopulationEstimate m;
  m.counts = Vector::Zero(p.N);
  double tau_sum = 0.0;
  Vector hist(p.N);
  for (const auto& seq : seqs) {
    hist.setZero();
    for (int z : seq.tokens) hist(z) += 1.0;
    hist /= static_cast<double>(seq.length());
    const int y = theory_label(seq);
    sums.col(y) += hist;
    total += hist;
    m.counts(y) += 1.0;
    ++m.samples;
    const double tau = tau_of(seq);
    if (!std::isnan(tau)) {
      tau_sum += tau;
      ++m.tau_sequences;
    }
  }
  const Matrix values = p.W_V2 * p.W_E;
  m.sums = values * sums;
  m.total = values * total;
  m.tau_hat = m.tau_sequences ? tau_sum / static_cast<double>(m.tau_sequences) : 0.0;
  return m;
}

}  // namespace

CurriculumReport three_step_curriculum(const CurriculumConfig& cfg) {
  if (cfg.samples_per_step < 0) throw std::invalid_argument("three_step_curriculum: negative sample count");
  if (cfg.d < 1 || cfg.N < 2 || cfg.T < 4) throw std::invalid_argument("three_step_curriculum: bad geometry");
  if (!(cfg.beta > 0.0)) throw std::invalid_argument("three_step_curriculum: beta must be positive");
  const RngStream root(cfg.seed);
  const MarkovSpec spec = uniform_markov(cfg.N);
  TriggerConfig trig;
  trig.K = 1;
  const SequenceSampler sampler(spec, trig);
  ModelParams p = init_params(cfg.d, cfg.N, cfg.T, TrainableInit::Zeros, false, root.child("params"));

  const TargetMemory mem_o2 = wo2_memory(p);
  const TargetMemory mem_k2 = wk2_memory(p, trig, spec);
  const TargetMemory mem_k1 = wk1_memory(p, 2, cfg.T);

  CurriculumReport rep;
  double tau_weighted = 0.0;
  long tau_count = 0;
  const std::vector<std::string> order =
      cfg.reversed ? std::vector<std::string>{"W_K2", "W_O2", "W_K1"} : std::vector<std::string>{"W_O2", "W_K2", "W_K1"};
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::string& name = order[i];
    const RngStream s = root.child("step").child(static_cast<std::uint64_t>(i));
    const auto seqs = sample_theory_batch(sampler, cfg.T, cfg.samples_per_step, s);
    CurriculumStep step;
    step.matrix = name;
    step.samples = cfg.samples_per_step;
    if (name == "W_O2") {
      Matrix W = Matrix::Zero(cfg.d, cfg.d);
      if (!seqs.empty()) {
        const PopulationEstimate m = sequence_average_moments(p, seqs);
        W = one_step_wo2(cfg.eta_o2, p, m).W;
        tau_weighted += m.tau_hat * static_cast<double>(m.tau_sequences);
        tau_count += m.tau_sequences;
      }
      p.W_O2 = normalize_to_target(W, mem_o2);
      step.recall = recall(p.W_O2, mem_o2);
      step.scores = score_table(p.W_U.transpose(), p.W_O2, p.W_V2 * p.W_E);
    } else if (name == "W_K2") {
      Matrix W = Matrix::Zero(cfg.d, cfg.d);
      if (!seqs.empty()) W = token_block(p, -cfg.eta_k2 * lemma3_closed_form(p, seqs));
      p.W_K2 = normalize_to_target(W, mem_k2);
      step.recall = recall(p.W_K2, mem_k2);
      step.scores = score_table(p.W_E, p.W_K2, p.phi1() * p.W_E);
    } else {
      Matrix W = Matrix::Zero(cfg.d, cfg.d);
      if (!seqs.empty()) W = -cfg.eta_k1 * lemma4_gradient_fast(p, seqs);
      p.W_K1 = normalize_to_target(W, mem_k1);
      step.recall = recall(p.W_K1, mem_k1);
      step.scores = score_table(p.P, p.W_K1, p.P);
    }
    rep.steps.push_back(std::move(step));
  }
  for (const auto& st : rep.steps) {
    if (st.matrix == "W_O2") rep.recall_wo2 = st.recall;
    if (st.matrix == "W_K2") rep.recall_wk2 = st.recall;
    if (st.matrix == "W_K1") rep.recall_wk1 = st.recall;
  }
  rep.previous_token_fraction = previous_token_fraction(p.W_K1, p.P);
  rep.tau_hat = tau_count ? tau_weighted / static_cast<double>(tau_count) : 0.0;

  p.W_K1 *= cfg.beta;
  p.W_K2 *= cfg.beta;
  std::vector<TaggedSequence> eval_set;
  const RngStream eval = root.child("eval");
  for (int b = 0; b < cfg.eval_batches; ++b) {
    auto batch = sampler.sample_batch(cfg.T, cfg.eval_batch_size, eval.child(static_cast<std::uint64_t>(b)));
    std::move(batch.begin(), batch.end(), std::back_inserter(eval_set));
  }
  rep.eval = evaluate_batch(p, eval_set);
  rep.installed = std::move(p);
  return rep;
}

}  // namespace bil
