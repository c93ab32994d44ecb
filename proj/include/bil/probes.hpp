#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bil/datagen.hpp"
#include "bil/model.hpp"

namespace bil {

/// One stored association: the memory should map input u to output v.
struct MemoryPair {
  Vector u;
  Vector v;
  int key_id = 0;
  int value_id = 0;
};

/// Associations plus the candidate outputs competing in the recall argmax.
/// Candidates are kept sorted by id so that the first maximum is the lowest id.
struct TargetMemory {
  std::vector<MemoryPair> pairs;
  std::vector<int> candidate_ids;
  Matrix candidates;  // d x C, column i is the vector of candidate_ids[i]

  void set_candidates(std::vector<int> ids, const Matrix& vectors_by_id);
  /// Every pair's value_id is a candidate and every vector is finite.
  void validate() const;
};

/// Fraction of pairs whose argmax over candidates of v^T W u is the pair's
/// value_id; the lowest id wins ties. Throws on an empty memory.
double recall(const Matrix& W, const TargetMemory& mem);

enum class Wk2Support { TriggerSupport, FullVocabulary };

/// Previous-token memory over positions t in [t_lo, t_hi], 1-based with
/// t_lo >= 2: u = p_{t-1}, v = p_t, candidates are all positions. Ids are
/// 0-based position indices.
TargetMemory wk1_memory(const ModelParams& params, int t_lo, int t_hi);

/// Induction memory: u = phi1 w_E(k), v = w_E(k) for k in the trigger
/// support (or every token).
TargetMemory wk2_memory(const ModelParams& params, const TriggerConfig& trig, const MarkovSpec& spec,
                        Wk2Support support = Wk2Support::TriggerSupport);

/// Copy memory: u = W_V2 w_E(k), v = w_U(k) for every token.
TargetMemory wo2_memory(const ModelParams& params);

struct TargetMemories {
  TargetMemory wk1_full;
  TargetMemory wk1_early;
  TargetMemory wk2;
  TargetMemory wo2;
};

inline constexpr int kEarlyWindowEnd = 64;

/// wk1_full covers [2, T]; wk1_early covers `early` (default [2, min(64, T)]).
TargetMemories target_memory_specs(const ModelParams& params, const TriggerConfig& trig, const MarkovSpec& spec,
                                   std::optional<std::pair<int, int>> early = std::nullopt,
                                   Wk2Support support = Wk2Support::TriggerSupport);

/// Rows of pi_b shifted by eps and renormalized.
Matrix smoothed_bigram(const MarkovSpec& spec, double eps);

/// (1/N) sum_k KL(softmax(W_U W_F w_E(k)) || smoothed pi_b(.|k)). Returns
/// +infinity when the smoothed table has zeros.
double kl_probe(const Matrix& W_F, const ModelParams& params, const MarkovSpec& spec, double eps = 1e-6);

/// Binary PGM (P5, maxval 255) of one attention layer; pixel (t, s) is
/// round(255 * a[t, s]). Throws std::runtime_error on I/O failure.
void attention_heatmap_export(const ForwardTrace& trace, int layer, const std::string& path);

}  // namespace bil
