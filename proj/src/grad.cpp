#include "bil/grad.hpp"

#include <cmath>

#include "bil/parallel.hpp"

namespace bil {

Matrix& Grads::operator[](const std::string& name) {
  if (name == "W_K1") return W_K1;
  if (name == "W_K2") return W_K2;
  if (name == "W_O2") return W_O2;
  if (name == "W_F") return W_F;
  throw std::invalid_argument("unknown gradient slot: " + name);
}

const Matrix& Grads::operator[](const std::string& name) const { return const_cast<Grads*>(this)->operator[](name); }

bool Grads::all_finite() const {
  return W_K1.allFinite() && W_K2.allFinite() && W_O2.allFinite() && W_F.allFinite();
}

namespace {

// Per-chunk accumulators. The first-layer key gradient is kept in the
// token/position block form and expanded once at the end.
struct Partial {
  double loss = 0.0;
  MetricSums metrics;
  Matrix dphi2, g_k2, g_f;
  Matrix ee, ep, pe, pp;

  void merge(const Partial& o) {
    loss += o.loss;
    metrics.merge(o.metrics);
    dphi2 += o.dphi2;
    g_k2 += o.g_k2;
    if (g_f.size()) g_f += o.g_f;
    ee += o.ee;
    ep += o.ep;
    pe += o.pe;
    pp += o.pp;
  }
};

Partial zero_partial(const ModelParams& p) {
  Partial z;
  z.dphi2 = Matrix::Zero(p.d, p.d);
  z.g_k2 = Matrix::Zero(p.d, p.d);
  if (p.use_ff) z.g_f = Matrix::Zero(p.d, p.d);
  z.ee = Matrix::Zero(p.N, p.N);
  z.ep = Matrix::Zero(p.N, p.T);
  z.pe = Matrix::Zero(p.T, p.N);
  z.pp = Matrix::Zero(p.T, p.T);
  return z;
}

long count_supervised(std::span<const TaggedSequence> batch, MaskMode mode) {
  long n = 0;
  for (const auto& seq : batch)
    for (int t = 0; t < seq.length(); ++t) n += supervised(seq, t, mode);
  return n;
}

Partial backward_chunk(const PreparedModel& prep, std::span<const TaggedSequence> chunk, MaskMode mode,
                       double weight) {
  const ModelParams& p = prep.params;
  const double c = p.attn_scale;
  Partial out = zero_partial(p);
  const BatchTrace bt = forward_batch(prep, token_views(chunk));
  const int L = bt.length;
  const Index cols = bt.logits.cols();

  Matrix G = Matrix::Zero(p.N, cols);
  for (int b = 0; b < bt.count; ++b) {
    const Index off = static_cast<Index>(b) * L;
    const TaggedSequence& seq = chunk[b];
    out.metrics.add(bt.logits.middleCols(off, L), seq);
    for (int t = 0; t < L; ++t) {
      if (!supervised(seq, t, mode)) continue;
      const int y = seq.tokens[t + 1];
      const Vector logp = log_softmax(bt.logits.col(off + t));
      out.loss -= logp(y);
      auto g = G.col(off + t);
      g = logp.array().exp() * weight;
      g(y) -= weight;
    }
  }

  Matrix dH = p.W_U.transpose() * G;
  if (p.use_ff) {
    out.g_f.noalias() = dH * bt.h2.transpose();
    dH += p.W_F.transpose() * dH;
  }
  // dH now holds the gradient with respect to h2.
  out.dphi2.noalias() = dH * bt.o2.transpose();
  const Matrix dO2 = prep.phi2.transpose() * dH;

  Matrix Y2(p.d, cols);
  for (int b = 0; b < bt.count; ++b) {
    const Index off = static_cast<Index>(b) * L;
    const auto dO2_b = dO2.middleCols(off, L);
    const auto H1_b = bt.h1.middleCols(off, L);
    const Matrix dA2 = dO2_b.transpose() * H1_b;
    dH.middleCols(off, L).noalias() += dO2_b * bt.a2[b].triangularView<Eigen::Lower>();
    const Matrix dS2 = softmax_backward(bt.a2[b], dA2);
    Y2.middleCols(off, L).noalias() = H1_b * dS2.triangularView<Eigen::Lower>();
    dH.middleCols(off, L).noalias() += bt.m2.middleCols(off, L) * dS2.transpose().triangularView<Eigen::Upper>();
  }
  out.g_k2.noalias() = c * (Y2 * bt.h1.transpose());
  dH.noalias() += c * (p.W_K2.transpose() * Y2);
  // dH now holds the gradient with respect to h1.

  for (int b = 0; b < bt.count; ++b) {
    const Index off = static_cast<Index>(b) * L;
    const Matrix dA1 = dH.middleCols(off, L).transpose() * bt.v1.middleCols(off, L);
    const Matrix dS1 = softmax_backward(bt.a1[b], dA1);
    const auto& z = chunk[b].tokens;
    for (int t = 0; t < L; ++t)
      for (int s = 0; s <= t; ++s) {
        const double g = dS1(t, s);
        out.ee(z[t], z[s]) += g;
        out.ep(z[t], s) += g;
        out.pe(t, z[s]) += g;
        out.pp(t, s) += g;
      }
  }
  return out;
}

}  // namespace

BackwardResult backward(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode) {
  if (batch.empty()) throw EmptyBatchError("backward: empty batch");
  const long n = count_supervised(batch, mode);
  if (n == 0) throw EmptyBatchError("backward: no supervised position in the batch");
  const double weight = 1.0 / static_cast<double>(n);

  const PreparedModel prep(params);
  const std::size_t chunks = (batch.size() + kBackwardChunk - 1) / kBackwardChunk;
  std::vector<Partial> partials(chunks);
  parallel_for(chunks, [&](std::size_t i) {
    const std::size_t lo = i * kBackwardChunk;
    partials[i] = backward_chunk(prep, batch.subspan(lo, std::min(kBackwardChunk, batch.size() - lo)), mode, weight);
  });
  Partial total = std::move(partials[0]);
  for (std::size_t i = 1; i < chunks; ++i) total.merge(partials[i]);

  const ModelParams& p = params;
  BackwardResult r;
  r.loss = total.loss * weight;
  r.supervised = n;
  r.metrics = total.metrics;
  r.grads.W_O2 = total.dphi2 * p.W_V2.transpose();
  r.grads.W_K2 = std::move(total.g_k2);
  if (p.use_ff) r.grads.W_F = std::move(total.g_f);
  const Matrix EE_t = p.W_E * total.ee;
  Matrix g1 = EE_t * p.W_E.transpose();
  g1.noalias() += (p.W_E * total.ep) * p.P.transpose();
  g1.noalias() += (p.P * total.pe) * p.W_E.transpose();
  g1.noalias() += (p.P * total.pp) * p.P.transpose();
  r.grads.W_K1 = p.attn_scale * g1;
  return r;
}

double batch_loss(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode) {
  const long n = count_supervised(batch, mode);
  if (n == 0) throw EmptyBatchError("batch_loss: no supervised position in the batch");
  const PreparedModel prep(params);
  double total = 0.0;
  for (std::size_t lo = 0; lo < batch.size(); lo += kBackwardChunk) {
    const auto chunk = batch.subspan(lo, std::min(kBackwardChunk, batch.size() - lo));
    const BatchTrace bt = forward_batch(prep, token_views(chunk));
    for (int b = 0; b < bt.count; ++b)
      for (int t = 0; t < bt.length; ++t) {
        if (!supervised(chunk[b], t, mode)) continue;
        const Vector logp = log_softmax(bt.logits.col(static_cast<Index>(b) * bt.length + t));
        total -= logp(chunk[b].tokens[t + 1]);
      }
  }
  return total / static_cast<double>(n);
}

std::vector<Coordinate> sample_coordinates(const ModelParams& params, int per_matrix, const RngStream& stream) {
  if (per_matrix < 0) throw std::invalid_argument("sample_coordinates: negative count");
  std::vector<Coordinate> coords;
  for (const auto& name : params.trainable_names()) {
    auto engine = stream.child(name).engine();
    const Matrix& m = params.trainable(name);
    std::uniform_int_distribution<Index> row(0, m.rows() - 1), col(0, m.cols() - 1);
    for (int i = 0; i < per_matrix; ++i) {
      const Index r = row(engine);
      coords.push_back({name, r, col(engine)});
    }
  }
  return coords;
}

std::vector<double> finite_diff_gradient(const std::function<double(const ModelParams&)>& f, const ModelParams& params,
                                         const std::vector<Coordinate>& coords, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_gradient: eps must lie in [1e-7, 1e-3]");
  ModelParams work = params;
  std::vector<double> out;
  out.reserve(coords.size());
  for (const auto& c : coords) {
    double& w = work.trainable(c.matrix)(c.row, c.col);
    const double saved = w;
    w = saved + eps;
    const double up = f(work);
    w = saved - eps;
    const double down = f(work);
    w = saved;
    out.push_back((up - down) / (2.0 * eps));
  }
  return out;
}

std::vector<double> finite_diff_gradient(const ModelParams& params, std::span<const TaggedSequence> batch,
                                         MaskMode mode, double eps, const std::vector<Coordinate>& coords) {
  return finite_diff_gradient([&](const ModelParams& p) { return batch_loss(p, batch, mode); }, params, coords, eps);
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-5);
}

GradcheckReport gradcheck(const Grads& analytic, const ModelParams& params, std::span<const TaggedSequence> batch,
                          MaskMode mode, const std::vector<Coordinate>& coords, double tol, double eps) {
  const auto numeric = finite_diff_gradient(params, batch, mode, eps, coords);
  GradcheckReport rep;
  rep.tol = tol;
  rep.checked = coords.size();
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const double a = analytic[coords[i].matrix](coords[i].row, coords[i].col);
    const double err = relative_error(a, numeric[i]);
    rep.max_rel_err = std::max(rep.max_rel_err, err);
    if (!(err <= tol)) rep.failing.push_back({coords[i], a, numeric[i], err});
  }
  return rep;
}

GradcheckReport gradcheck(const ModelParams& params, std::span<const TaggedSequence> batch, MaskMode mode,
                          const std::vector<Coordinate>& coords, double tol, double eps) {
  return gradcheck(backward(params, batch, mode).grads, params, batch, mode, coords, tol, eps);
}

Matrix readout_backward(const Matrix& W, const Matrix& W_E, const Matrix& W_U,
                        const std::vector<ReadoutExample>& examples) {
  if (W.rows() != W_U.cols() || W.cols() != W_E.rows())
    throw std::invalid_argument("readout_backward: shape mismatch");
  const Index n = static_cast<Index>(examples.size());
  Matrix X(W_E.rows(), n);
  Matrix G(W_U.rows(), n);
  const Matrix WE_mapped = W_U * (W * W_E);
  for (Index i = 0; i < n; ++i) {
    const auto& ex = examples[i];
    if (ex.input < 0 || ex.input >= W_E.cols() || ex.target < 0 || ex.target >= W_U.rows())
      throw std::invalid_argument("readout_backward: token outside the vocabulary");
    X.col(i) = W_E.col(ex.input);
    G.col(i) = log_softmax(WE_mapped.col(ex.input)).array().exp() * ex.weight;
    G(ex.target, i) -= ex.weight;
  }
  return W_U.transpose() * G * X.transpose();
}

}  // namespace bil
