#include "bil/probes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace bil {

void TargetMemory::set_candidates(std::vector<int> ids, const Matrix& vectors_by_id) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  candidates.resize(vectors_by_id.rows(), static_cast<Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) candidates.col(static_cast<Index>(i)) = vectors_by_id.col(ids[i]);
  candidate_ids = std::move(ids);
}

void TargetMemory::validate() const {
  if (pairs.empty()) throw std::invalid_argument("TargetMemory: no pairs");
  if (!candidates.allFinite()) throw std::invalid_argument("TargetMemory: non-finite candidate");
  for (const auto& p : pairs) {
    if (!std::binary_search(candidate_ids.begin(), candidate_ids.end(), p.value_id))
      throw std::invalid_argument("TargetMemory: value id missing from candidates");
    if (!p.u.allFinite() || !p.v.allFinite()) throw std::invalid_argument("TargetMemory: non-finite pair");
  }
}

double recall(const Matrix& W, const TargetMemory& mem) {
  if (mem.pairs.empty()) throw std::invalid_argument("recall: empty memory");
  const Index d = mem.candidates.rows();
  if (W.rows() != d || W.cols() != mem.pairs.front().u.size())
    throw std::invalid_argument("recall: dimension mismatch");
  Matrix U(W.cols(), static_cast<Index>(mem.pairs.size()));
  for (std::size_t i = 0; i < mem.pairs.size(); ++i) U.col(static_cast<Index>(i)) = mem.pairs[i].u;
  const Matrix scores = mem.candidates.transpose() * (W * U);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < mem.pairs.size(); ++i)
    hits += mem.candidate_ids[argmax_lowest(scores.col(static_cast<Index>(i)))] == mem.pairs[i].value_id;
  return static_cast<double>(hits) / static_cast<double>(mem.pairs.size());
}

TargetMemory wk1_memory(const ModelParams& params, int t_lo, int t_hi) {
  if (t_lo < 2 || t_hi > params.T || t_lo > t_hi)
    throw std::invalid_argument("wk1_memory: window must satisfy 2 <= t_lo <= t_hi <= T");
  TargetMemory mem;
  for (int t = t_lo; t <= t_hi; ++t) mem.pairs.push_back({params.P.col(t - 2), params.P.col(t - 1), t - 2, t - 1});
  std::vector<int> ids(params.T);
  for (int i = 0; i < params.T; ++i) ids[i] = i;
  mem.set_candidates(std::move(ids), params.P);
  return mem;
}

TargetMemory wk2_memory(const ModelParams& params, const TriggerConfig& trig, const MarkovSpec& spec,
                        Wk2Support support) {
  std::vector<int> tokens;
  if (support == Wk2Support::FullVocabulary) {
    for (int k = 0; k < params.N; ++k) tokens.push_back(k);
  } else {
    tokens = trig.support(spec);
  }
  if (tokens.empty()) throw std::invalid_argument("wk2_memory: empty trigger support");
  const Matrix remapped = params.phi1() * params.W_E;
  TargetMemory mem;
  for (int k : tokens) {
    if (k < 0 || k >= params.N) throw std::invalid_argument("wk2_memory: trigger outside vocabulary");
    mem.pairs.push_back({remapped.col(k), params.W_E.col(k), k, k});
  }
  mem.set_candidates(tokens, params.W_E);
  return mem;
}

TargetMemory wo2_memory(const ModelParams& params) {
  const Matrix values = params.W_V2 * params.W_E;
  const Matrix outputs = params.W_U.transpose();
  TargetMemory mem;
  std::vector<int> ids(params.N);
  for (int k = 0; k < params.N; ++k) {
    mem.pairs.push_back({values.col(k), outputs.col(k), k, k});
    ids[k] = k;
  }
  mem.set_candidates(std::move(ids), outputs);
  return mem;
}

TargetMemories target_memory_specs(const ModelParams& params, const TriggerConfig& trig, const MarkovSpec& spec,
                                   std::optional<std::pair<int, int>> early, Wk2Support support) {
  if (params.T < 2) throw std::invalid_argument("target_memory_specs: T must be at least 2");
  const auto window = early.value_or(std::pair{2, std::min(kEarlyWindowEnd, params.T)});
  TargetMemories m;
  m.wk1_full = wk1_memory(params, 2, params.T);
  m.wk1_early = wk1_memory(params, window.first, window.second);
  m.wk2 = wk2_memory(params, trig, spec, support);
  m.wo2 = wo2_memory(params);
  return m;
}

Matrix smoothed_bigram(const MarkovSpec& spec, double eps) {
  if (!(eps >= 0.0)) throw std::invalid_argument("smoothed_bigram: eps must be nonnegative");
  Matrix out = spec.pi_b.array() + eps;
  for (Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).sum();
  return out;
}

double kl_probe(const Matrix& W_F, const ModelParams& params, const MarkovSpec& spec, double eps) {
  if (spec.N != params.N) throw std::invalid_argument("kl_probe: vocabulary mismatch");
  const Matrix target = smoothed_bigram(spec, eps);
  const Matrix logits = params.W_U * (W_F * params.W_E);
  double total = 0.0;
  for (int k = 0; k < params.N; ++k) {
    const Vector logq = log_softmax(logits.col(k));
    for (int j = 0; j < params.N; ++j) {
      const double q = std::exp(logq(j));
      if (q == 0.0) continue;
      if (target(k, j) == 0.0) return std::numeric_limits<double>::infinity();
      total += q * (logq(j) - std::log(target(k, j)));
    }
  }
  return std::max(0.0, total / params.N);
}

void attention_heatmap_export(const ForwardTrace& trace, int layer, const std::string& path) {
  if (layer != 1 && layer != 2) throw std::invalid_argument("attention_heatmap_export: layer must be 1 or 2");
  const Matrix& a = layer == 1 ? trace.a1 : trace.a2;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("attention_heatmap_export: cannot open " + path);
  out << "P5\n" << a.cols() << ' ' << a.rows() << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(a.cols()));
  for (Index t = 0; t < a.rows(); ++t) {
    for (Index s = 0; s < a.cols(); ++s)
      row[s] = static_cast<unsigned char>(std::clamp(std::lround(255.0 * a(t, s)), 0L, 255L));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("attention_heatmap_export: write failed for " + path);
}

}  // namespace bil
