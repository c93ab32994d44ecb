#pragma once

#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bil/linalg.hpp"
#include "bil/rng.hpp"
#include "json.hpp"

namespace bil {

/// Global character-level language model: unigram pi_u and bigram pi_b,
/// where row i of pi_b is the conditional distribution of the next token
/// given token i.
struct MarkovSpec {
  int N = 0;
  std::vector<unsigned char> chars;  // empty for synthetic vocabularies
  Vector pi_u;
  Matrix pi_b;

  /// Throws std::invalid_argument unless shapes agree, entries are
  /// nonnegative and every distribution sums to 1 within 1e-12.
  void validate() const;
};

/// Raised when a distribution has too few nonzero entries for the requested draw.
class DistributionSupportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vocabulary is the set of distinct bytes in sorted order. Bigram rows with
/// no observed successor fall back to the unigram distribution.
MarkovSpec estimate_markov(std::string_view text);

/// Uniform unigram and uniform bigram rows over N tokens.
MarkovSpec uniform_markov(int N);

/// Stand-in for a character corpus: bigram rows drawn from a symmetric
/// Dirichlet(concentration) and pi_u set to the stationary distribution of
/// the resulting chain.
MarkovSpec synthetic_markov(int N, double concentration, const RngStream& stream);

nlohmann::json markov_to_json(const MarkovSpec& spec);
MarkovSpec markov_from_json(const nlohmann::json& doc);

/// Entropy rate sum_i pi_u(i) H(pi_b(.|i)) in nats.
double bigram_entropy_rate(const MarkovSpec& spec);

/// Tokens ranked [rank_offset, rank_offset + K) by decreasing pi_u, ties
/// broken by lower token index.
std::vector<int> fixed_triggers(const MarkovSpec& spec, int K, int rank_offset);

enum class TriggerMode { Fixed, Random };
enum class OutputMode { Uniform, Bigram };

struct TriggerConfig {
  TriggerMode mode = TriggerMode::Random;
  int K = 1;
  std::vector<int> fixed_set;  // fixed mode
  Vector pi_q;                 // random mode; empty means pi_u
  OutputMode output_mode = OutputMode::Uniform;

  void validate(const MarkovSpec& spec) const;
  /// Tokens that can act as triggers: Q in fixed mode, supp(pi_q) otherwise.
  [[nodiscard]] std::vector<int> support(const MarkovSpec& spec) const;
};

/// A sampled sequence with the per-position annotations used by loss masks
/// and metrics. Positions are 0-based.
struct TaggedSequence {
  std::vector<int> tokens;
  std::vector<int> triggers;
  std::vector<int> outputs;
  std::vector<bool> is_trigger;
  std::vector<int> occurrence;  // m for the m-th occurrence of that trigger token, 0 otherwise
  int first_output_pos = -1;    // position right after the first occurrence of triggers[0]

  [[nodiscard]] int length() const { return static_cast<int>(tokens.size()); }
  /// Trigger at its second or later occurrence, with a next token to predict.
  [[nodiscard]] bool in_context(int pos) const {
    return pos + 1 < length() && is_trigger[pos] && occurrence[pos] >= 2;
  }
  /// Non-trigger position with a next token to predict.
  [[nodiscard]] bool global(int pos) const { return pos + 1 < length() && !is_trigger[pos]; }
};

/// Reusable sampler; precomputes the cumulative tables of every distribution.
class SequenceSampler {
 public:
  SequenceSampler(const MarkovSpec& spec, const TriggerConfig& cfg);

  [[nodiscard]] TaggedSequence sample(int T, const RngStream& stream) const;
  [[nodiscard]] std::vector<TaggedSequence> sample_batch(int T, int batch_size,
                                                         const RngStream& stream) const;

  [[nodiscard]] const MarkovSpec& spec() const { return spec_; }
  [[nodiscard]] const TriggerConfig& config() const { return cfg_; }

 private:
  using Param = std::discrete_distribution<int>::param_type;

  std::vector<int> draw_triggers(RngStream::Engine& engine) const;

  MarkovSpec spec_;
  TriggerConfig cfg_;
  Param unigram_;
  std::vector<Param> bigram_;
  Vector trigger_weights_;
};

TaggedSequence sample_tagged_sequence(const MarkovSpec& spec, const TriggerConfig& cfg, int T,
                                      const RngStream& stream);

/// Recomputes is_trigger, occurrence and first_output_pos from tokens and triggers.
void annotate(TaggedSequence& seq);

}  // namespace bil
