#include "bil/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "bil/embeddings.hpp"
#include "json.hpp"

namespace bil {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct NamedMatrix {
  const char* name;
  Matrix ModelParams::*member;
};

constexpr NamedMatrix kLayout[] = {
    {"W_E", &ModelParams::W_E},   {"W_U", &ModelParams::W_U},   {"P", &ModelParams::P},
    {"W_V1", &ModelParams::W_V1}, {"W_O1", &ModelParams::W_O1}, {"W_V2", &ModelParams::W_V2},
    {"W_K1", &ModelParams::W_K1}, {"W_K2", &ModelParams::W_K2}, {"W_O2", &ModelParams::W_O2},
    {"W_F", &ModelParams::W_F},
};

}  // namespace

std::vector<std::string> ModelParams::trainable_names() const {
  std::vector<std::string> names{"W_K1", "W_K2", "W_O2"};
  if (use_ff) names.emplace_back("W_F");
  return names;
}

Matrix& ModelParams::trainable(const std::string& name) {
  if (name == "W_K1") return W_K1;
  if (name == "W_K2") return W_K2;
  if (name == "W_O2") return W_O2;
  if (name == "W_F" && use_ff) return W_F;
  throw std::invalid_argument("unknown trainable matrix: " + name);
}

const Matrix& ModelParams::trainable(const std::string& name) const {
  return const_cast<ModelParams*>(this)->trainable(name);
}

ModelParams init_params(int d, int N, int T, TrainableInit init, bool use_ff, const RngStream& stream,
                        double attn_scale) {
  if (d < 1 || N < 1 || T < 1) throw std::invalid_argument("init_params: d, N and T must be positive");
  if (!(attn_scale > 0.0)) throw std::invalid_argument("init_params: attn_scale must be positive");
  ModelParams p;
  p.d = d;
  p.N = N;
  p.T = T;
  p.use_ff = use_ff;
  p.attn_scale = attn_scale;
  const double var = 1.0 / d;
  p.W_E = gaussian_matrix(d, N, var, stream.child("W_E"));
  p.W_U = gaussian_matrix(d, N, var, stream.child("W_U")).transpose();
  p.P = gaussian_matrix(d, T, var, stream.child("P"));
  p.W_V1 = gaussian_matrix(d, d, var, stream.child("W_V1"));
  p.W_O1 = gaussian_matrix(d, d, var, stream.child("W_O1"));
  p.W_V2 = gaussian_matrix(d, d, var, stream.child("W_V2"));
  auto trainable = [&](const char* name) -> Matrix {
    if (init == TrainableInit::Zeros) return Matrix::Zero(d, d);
    return gaussian_matrix(d, d, var, stream.child(name));
  };
  p.W_K1 = trainable("W_K1");
  p.W_K2 = trainable("W_K2");
  p.W_O2 = trainable("W_O2");
  if (use_ff) p.W_F = trainable("W_F");
  return p;
}

PreparedModel::PreparedModel(const ModelParams& p) : params(p) {
  phi1 = p.phi1();
  phi2 = p.phi2();
  phi1_E = phi1 * p.W_E;
  phi1_P = phi1 * p.P;
  const Matrix kE = p.attn_scale * (p.W_K1 * p.W_E);
  const Matrix kP = p.attn_scale * (p.W_K1 * p.P);
  k1_EE = p.W_E.transpose() * kE;
  k1_EP = p.W_E.transpose() * kP;
  k1_PE = p.P.transpose() * kE;
  k1_PP = p.P.transpose() * kP;
}

ForwardTrace BatchTrace::sequence(int b) const {
  if (b < 0 || b >= count) throw std::out_of_range("BatchTrace::sequence: index out of range");
  const Index off = static_cast<Index>(b) * length;
  ForwardTrace t;
  t.x0 = x0.middleCols(off, length);
  t.a1 = a1[b];
  t.a2 = a2[b];
  t.h1 = h1.middleCols(off, length);
  t.h2 = h2.middleCols(off, length);
  if (h3.size()) t.h3 = h3.middleCols(off, length);
  t.logits = logits.middleCols(off, length);
  return t;
}

TokenBatch token_views(std::span<const TaggedSequence> batch) {
  TokenBatch views;
  views.reserve(batch.size());
  for (const auto& s : batch) views.emplace_back(s.tokens);
  return views;
}

void causal_softmax_inplace(Matrix& scores) {
  const Index L = scores.rows();
  for (Index t = 0; t < L; ++t) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index s = 0; s <= t; ++s) mx = std::max(mx, scores(t, s));
    double total = 0.0;
    for (Index s = 0; s <= t; ++s) {
      const double e = std::exp(scores(t, s) - mx);
      scores(t, s) = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (Index s = 0; s <= t; ++s) scores(t, s) *= inv;
    for (Index s = t + 1; s < scores.cols(); ++s) scores(t, s) = 0.0;
  }
}

Matrix softmax_backward(const Matrix& A, const Matrix& dA) {
  Matrix dS = Matrix::Zero(A.rows(), A.cols());
  for (Index t = 0; t < A.rows(); ++t) {
    double inner = 0.0;
    for (Index s = 0; s <= t; ++s) inner += A(t, s) * dA(t, s);
    for (Index s = 0; s <= t; ++s) dS(t, s) = A(t, s) * (dA(t, s) - inner);
  }
  return dS;
}

BatchTrace forward_batch(const PreparedModel& prep, const TokenBatch& tokens) {
  const ModelParams& p = prep.params;
  if (tokens.empty()) throw std::invalid_argument("forward: empty batch");
  const int L = static_cast<int>(tokens.front().size());
  if (L < 1 || L > p.T) throw std::invalid_argument("forward: sequence length must lie in [1, T]");
  for (const auto& seq : tokens) {
    if (static_cast<int>(seq.size()) != L) throw std::invalid_argument("forward: sequences differ in length");
    for (int z : seq)
      if (z < 0 || z >= p.N) throw std::invalid_argument("forward: token outside the vocabulary");
  }

  BatchTrace bt;
  bt.length = L;
  bt.count = static_cast<int>(tokens.size());
  const Index cols = static_cast<Index>(L) * bt.count;
  bt.x0.resize(p.d, cols);
  bt.v1.resize(p.d, cols);
  for (int b = 0; b < bt.count; ++b)
    for (int t = 0; t < L; ++t) {
      const Index c = static_cast<Index>(b) * L + t;
      const int z = tokens[b][t];
      bt.x0.col(c) = p.W_E.col(z) + p.P.col(t);
      bt.v1.col(c) = prep.phi1_E.col(z) + prep.phi1_P.col(t);
    }

  bt.a1.resize(bt.count);
  bt.a2.resize(bt.count);
  bt.h1 = bt.x0;
  for (int b = 0; b < bt.count; ++b) {
    Matrix s1(L, L);
    const auto& z = tokens[b];
    for (int t = 0; t < L; ++t)
      for (int s = 0; s <= t; ++s)
        s1(t, s) = prep.k1_EE(z[t], z[s]) + prep.k1_EP(z[t], s) + prep.k1_PE(t, z[s]) + prep.k1_PP(t, s);
    causal_softmax_inplace(s1);
    bt.a1[b] = std::move(s1);
    const Index off = static_cast<Index>(b) * L;
    bt.h1.middleCols(off, L).noalias() +=
        bt.v1.middleCols(off, L) * bt.a1[b].transpose().triangularView<Eigen::Upper>();
  }

  bt.m2.noalias() = p.attn_scale * (p.W_K2 * bt.h1);
  bt.o2.resize(p.d, cols);
  for (int b = 0; b < bt.count; ++b) {
    const Index off = static_cast<Index>(b) * L;
    Matrix s2 = bt.h1.middleCols(off, L).transpose() * bt.m2.middleCols(off, L);
    causal_softmax_inplace(s2);
    bt.a2[b] = std::move(s2);
    bt.o2.middleCols(off, L).noalias() =
        bt.h1.middleCols(off, L) * bt.a2[b].transpose().triangularView<Eigen::Upper>();
  }
  bt.h2 = bt.h1;
  bt.h2.noalias() += prep.phi2 * bt.o2;
  if (p.use_ff) {
    bt.h3 = bt.h2;
    bt.h3.noalias() += p.W_F * bt.h2;
  }
  bt.logits.noalias() = p.W_U * bt.final_stream();
  return bt;
}

ForwardTrace forward(const ModelParams& params, std::span<const int> tokens) {
  const PreparedModel prep(params);
  return forward_batch(prep, TokenBatch{tokens}).sequence(0);
}

bool supervised(const TaggedSequence& seq, int t, MaskMode mode) {
  if (t + 1 >= seq.length()) return false;
  return mode == MaskMode::All || seq.in_context(t);
}

int argmax_lowest(const Eigen::Ref<const Vector>& v) {
  int best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

Vector log_softmax(const Eigen::Ref<const Vector>& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

void MetricSums::add(const Eigen::Ref<const Matrix>& logits, const TaggedSequence& seq) {
  const int L = seq.length();
  if (logits.cols() != L) throw std::invalid_argument("MetricSums::add: logits do not match the sequence");
  for (int t = 0; t + 1 < L; ++t) {
    const int y = seq.tokens[t + 1];
    const Vector col = logits.col(t);
    const double mx = col.maxCoeff();
    const double loss = mx + std::log((col.array() - mx).exp().sum()) - col(y);
    const bool hit = argmax_lowest(col) == y;
    loss_all += loss;
    correct_all += hit;
    ++n_all;
    if (seq.global(t)) {
      loss_global += loss;
      ++n_global;
    }
    if (seq.in_context(t)) {
      loss_icl += loss;
      correct_icl += hit;
      ++n_icl;
    }
  }
}

void MetricSums::merge(const MetricSums& o) {
  loss_all += o.loss_all;
  loss_global += o.loss_global;
  loss_icl += o.loss_icl;
  correct_all += o.correct_all;
  correct_icl += o.correct_icl;
  n_all += o.n_all;
  n_global += o.n_global;
  n_icl += o.n_icl;
}

LossMetrics MetricSums::finalize() const {
  auto mean = [](double sum, long n) -> std::optional<double> {
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  };
  return {mean(loss_all, n_all), mean(loss_global, n_global), mean(loss_icl, n_icl), mean(correct_icl, n_icl),
          mean(correct_all, n_all)};
}

LossMetrics loss_and_metrics(const ForwardTrace& trace, const TaggedSequence& seq) {
  MetricSums sums;
  sums.add(trace.logits, seq);
  return sums.finalize();
}

LossMetrics evaluate_batch(const ModelParams& params, std::span<const TaggedSequence> batch) {
  const PreparedModel prep(params);
  MetricSums sums;
  constexpr std::size_t kChunk = 16;
  for (std::size_t lo = 0; lo < batch.size(); lo += kChunk) {
    const auto part = batch.subspan(lo, std::min(kChunk, batch.size() - lo));
    const BatchTrace bt = forward_batch(prep, token_views(part));
    for (int b = 0; b < bt.count; ++b)
      sums.add(bt.logits.middleCols(static_cast<Index>(b) * bt.length, bt.length), part[b]);
  }
  return sums.finalize();
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  nlohmann::json header{{"d", params.d},
                        {"N", params.N},
                        {"T", params.T},
                        {"use_ff", params.use_ff},
                        {"attn_scale", params.attn_scale}};
  nlohmann::json list = nlohmann::json::array();
  for (const auto& entry : kLayout) {
    const Matrix& m = params.*entry.member;
    if (m.size() == 0) continue;
    list.push_back({{"name", entry.name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  header["matrices"] = list;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << header.dump() << '\n';
  for (const auto& entry : kLayout) {
    const Matrix& m = params.*entry.member;
    if (m.size() == 0) continue;
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string line;
  std::getline(in, line);
  const auto header = nlohmann::json::parse(line);
  ModelParams p;
  p.d = header.at("d").get<int>();
  p.N = header.at("N").get<int>();
  p.T = header.at("T").get<int>();
  p.use_ff = header.at("use_ff").get<bool>();
  p.attn_scale = header.at("attn_scale").get<double>();
  for (const auto& m : header.at("matrices")) {
    const auto name = m.at("name").get<std::string>();
    const NamedMatrix* entry = nullptr;
    for (const auto& e : kLayout)
      if (name == e.name) entry = &e;
    if (!entry) throw std::runtime_error("load_checkpoint: unknown matrix " + name);
    Matrix& dst = p.*(entry->member);
    dst.resize(m.at("rows").get<Index>(), m.at("cols").get<Index>());
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated data in " + path);
  }
  return p;
}

}  // namespace bil
