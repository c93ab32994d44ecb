#include "bil/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace bil {

namespace {

constexpr double kSumTolerance = 1e-12;

void check_distribution(const Eigen::Ref<const Vector>& p, const std::string& what) {
  if ((p.array() < 0.0).any() || !p.allFinite())
    throw std::invalid_argument(what + ": negative or non-finite probability");
  if (std::abs(p.sum() - 1.0) > kSumTolerance)
    throw std::invalid_argument(what + ": probabilities do not sum to 1");
}

std::vector<double> to_std(const Eigen::Ref<const Vector>& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

void MarkovSpec::validate() const {
  if (N < 1) throw std::invalid_argument("MarkovSpec: empty vocabulary");
  if (pi_u.size() != N || pi_b.rows() != N || pi_b.cols() != N)
    throw std::invalid_argument("MarkovSpec: table shapes do not match N");
  if (!chars.empty() && static_cast<int>(chars.size()) != N)
    throw std::invalid_argument("MarkovSpec: character table does not match N");
  check_distribution(pi_u, "pi_u");
  for (int i = 0; i < N; ++i) check_distribution(pi_b.row(i).transpose(), "pi_b row " + std::to_string(i));
}

MarkovSpec estimate_markov(std::string_view text) {
  if (text.size() < 2) throw std::invalid_argument("estimate_markov: text needs at least two characters");
  std::array<int, 256> index{};
  index.fill(-1);
  std::array<bool, 256> seen{};
  for (unsigned char c : text) seen[c] = true;

  MarkovSpec spec;
  for (int c = 0; c < 256; ++c)
    if (seen[c]) {
      index[c] = spec.N++;
      spec.chars.push_back(static_cast<unsigned char>(c));
    }

  Vector counts = Vector::Zero(spec.N);
  Matrix pair_counts = Matrix::Zero(spec.N, spec.N);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int a = index[static_cast<unsigned char>(text[i])];
    counts(a) += 1.0;
    if (i + 1 < text.size()) pair_counts(a, index[static_cast<unsigned char>(text[i + 1])]) += 1.0;
  }
  spec.pi_u = counts / counts.sum();
  spec.pi_b.resize(spec.N, spec.N);
  for (int i = 0; i < spec.N; ++i) {
    const double row = pair_counts.row(i).sum();
    if (row > 0.0)
      spec.pi_b.row(i) = pair_counts.row(i) / row;
    else
      spec.pi_b.row(i) = spec.pi_u.transpose();
  }
  return spec;
}

MarkovSpec uniform_markov(int N) {
  if (N < 1) throw std::invalid_argument("uniform_markov: N must be positive");
  MarkovSpec spec;
  spec.N = N;
  spec.pi_u = Vector::Constant(N, 1.0 / N);
  spec.pi_b = Matrix::Constant(N, N, 1.0 / N);
  return spec;
}

MarkovSpec synthetic_markov(int N, double concentration, const RngStream& stream) {
  if (N < 1) throw std::invalid_argument("synthetic_markov: N must be positive");
  if (!(concentration > 0.0)) throw std::invalid_argument("synthetic_markov: concentration must be positive");
  auto engine = stream.engine();
  std::gamma_distribution<double> gamma(concentration, 1.0);
  MarkovSpec spec;
  spec.N = N;
  spec.pi_b.resize(N, N);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) spec.pi_b(i, j) = gamma(engine) + 1e-12;
    spec.pi_b.row(i) /= spec.pi_b.row(i).sum();
  }
  // Stationary distribution by power iteration; every entry is positive so
  // the chain is ergodic.
  Vector pi = Vector::Constant(N, 1.0 / N);
  for (int it = 0; it < 100000; ++it) {
    Vector next = spec.pi_b.transpose() * pi;
    next /= next.sum();
    const double change = (next - pi).cwiseAbs().sum();
    pi = next;
    if (change < 1e-15) break;
  }
  spec.pi_u = pi / pi.sum();
  return spec;
}

nlohmann::json markov_to_json(const MarkovSpec& spec) {
  nlohmann::json doc;
  doc["N"] = spec.N;
  if (!spec.chars.empty()) {
    std::vector<int> codes(spec.chars.begin(), spec.chars.end());
    doc["chars"] = codes;
  }
  doc["pi_u"] = to_std(spec.pi_u);
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < spec.N; ++i) rows.push_back(to_std(spec.pi_b.row(i).transpose()));
  doc["pi_b"] = std::move(rows);
  return doc;
}

MarkovSpec markov_from_json(const nlohmann::json& doc) {
  MarkovSpec spec;
  spec.N = doc.at("N").get<int>();
  if (doc.contains("chars"))
    for (int c : doc.at("chars").get<std::vector<int>>()) spec.chars.push_back(static_cast<unsigned char>(c));
  const auto pu = doc.at("pi_u").get<std::vector<double>>();
  spec.pi_u = Eigen::Map<const Vector>(pu.data(), static_cast<Index>(pu.size()));
  const auto& rows = doc.at("pi_b");
  if (!rows.is_array() || static_cast<int>(rows.size()) != spec.N)
    throw std::invalid_argument("markov_from_json: pi_b must have N rows");
  spec.pi_b.resize(spec.N, spec.N);
  for (int i = 0; i < spec.N; ++i) {
    const auto r = rows[i].get<std::vector<double>>();
    if (static_cast<int>(r.size()) != spec.N) throw std::invalid_argument("markov_from_json: ragged pi_b");
    for (int j = 0; j < spec.N; ++j) spec.pi_b(i, j) = r[j];
  }
  spec.validate();
  return spec;
}

double bigram_entropy_rate(const MarkovSpec& spec) {
  double h = 0.0;
  for (int i = 0; i < spec.N; ++i)
    for (int j = 0; j < spec.N; ++j) {
      const double p = spec.pi_b(i, j);
      if (p > 0.0) h -= spec.pi_u(i) * p * std::log(p);
    }
  return h;
}

std::vector<int> fixed_triggers(const MarkovSpec& spec, int K, int rank_offset) {
  if (K < 0 || rank_offset < 0 || rank_offset + K > spec.N)
    throw std::invalid_argument("fixed_triggers: requested ranks exceed the vocabulary");
  std::vector<int> order(spec.N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return spec.pi_u(a) > spec.pi_u(b); });
  return {order.begin() + rank_offset, order.begin() + rank_offset + K};
}

void TriggerConfig::validate(const MarkovSpec& spec) const {
  if (K < 1) throw std::invalid_argument("TriggerConfig: K must be at least 1");
  if (mode == TriggerMode::Fixed) {
    if (static_cast<int>(fixed_set.size()) != K)
      throw std::invalid_argument("TriggerConfig: fixed set must contain exactly K tokens");
    std::vector<int> sorted = fixed_set;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("TriggerConfig: fixed triggers must be distinct");
    for (int q : fixed_set)
      if (q < 0 || q >= spec.N) throw std::invalid_argument("TriggerConfig: trigger outside vocabulary");
  } else {
    const Vector& q = pi_q.size() ? pi_q : spec.pi_u;
    if (q.size() != spec.N) throw std::invalid_argument("TriggerConfig: pi_q does not match N");
    check_distribution(q, "pi_q");
    if ((q.array() > 0.0).count() < K)
      throw DistributionSupportError("TriggerConfig: pi_q support is smaller than K");
  }
}

std::vector<int> TriggerConfig::support(const MarkovSpec& spec) const {
  if (mode == TriggerMode::Fixed) return fixed_set;
  const Vector& q = pi_q.size() ? pi_q : spec.pi_u;
  std::vector<int> out;
  for (int i = 0; i < q.size(); ++i)
    if (q(i) > 0.0) out.push_back(i);
  return out;
}

SequenceSampler::SequenceSampler(const MarkovSpec& spec, const TriggerConfig& cfg) : spec_(spec), cfg_(cfg) {
  spec_.validate();
  cfg_.validate(spec_);
  unigram_ = Param(spec_.pi_u.data(), spec_.pi_u.data() + spec_.N);
  bigram_.reserve(spec_.N);
  for (int i = 0; i < spec_.N; ++i) {
    const auto row = to_std(spec_.pi_b.row(i).transpose());
    bigram_.emplace_back(row.begin(), row.end());
  }
  if (cfg_.mode == TriggerMode::Random) trigger_weights_ = cfg_.pi_q.size() ? cfg_.pi_q : spec_.pi_u;
}

std::vector<int> SequenceSampler::draw_triggers(RngStream::Engine& engine) const {
  if (cfg_.mode == TriggerMode::Fixed) return cfg_.fixed_set;
  // Sequential draws that never repeat a token: each draw is from pi_q with
  // the already chosen tokens removed, which is the same law as redrawing
  // until a new token comes up.
  std::vector<double> w = to_std(trigger_weights_);
  std::vector<int> chosen;
  std::discrete_distribution<int> dist;
  for (int k = 0; k < cfg_.K; ++k) {
    if (std::none_of(w.begin(), w.end(), [](double x) { return x > 0.0; }))
      throw DistributionSupportError("sample_tagged_sequence: pi_q support exhausted");
    const int q = dist(engine, Param(w.begin(), w.end()));
    chosen.push_back(q);
    w[q] = 0.0;
  }
  return chosen;
}

TaggedSequence SequenceSampler::sample(int T, const RngStream& stream) const {
  if (T < 2) throw std::invalid_argument("sample_tagged_sequence: T must be at least 2");
  auto engine = stream.engine();
  TaggedSequence seq;
  seq.triggers = draw_triggers(engine);

  std::discrete_distribution<int> dist;
  std::uniform_int_distribution<int> uniform(0, spec_.N - 1);
  std::vector<int> output_of(spec_.N, -1);
  for (int q : seq.triggers) {
    const int o = cfg_.output_mode == OutputMode::Uniform ? uniform(engine) : dist(engine, bigram_[q]);
    seq.outputs.push_back(o);
    output_of[q] = o;
  }

  seq.tokens.resize(T);
  seq.tokens[0] = dist(engine, unigram_);
  for (int t = 1; t < T; ++t) {
    const int prev = seq.tokens[t - 1];
    seq.tokens[t] = output_of[prev] >= 0 ? output_of[prev] : dist(engine, bigram_[prev]);
  }
  annotate(seq);
  return seq;
}

std::vector<TaggedSequence> SequenceSampler::sample_batch(int T, int batch_size, const RngStream& stream) const {
  std::vector<TaggedSequence> batch;
  batch.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) batch.push_back(sample(T, stream.child(static_cast<std::uint64_t>(b))));
  return batch;
}

TaggedSequence sample_tagged_sequence(const MarkovSpec& spec, const TriggerConfig& cfg, int T,
                                      const RngStream& stream) {
  return SequenceSampler(spec, cfg).sample(T, stream);
}

void annotate(TaggedSequence& seq) {
  const int T = seq.length();
  seq.is_trigger.assign(T, false);
  seq.occurrence.assign(T, 0);
  seq.first_output_pos = -1;
  int max_token = 0;
  for (int z : seq.tokens) max_token = std::max(max_token, z);
  for (int q : seq.triggers) max_token = std::max(max_token, q);
  std::vector<int> is_q(max_token + 1, 0);
  for (int q : seq.triggers) is_q[q] = 1;
  std::vector<int> seen(max_token + 1, 0);
  for (int t = 0; t < T; ++t) {
    const int z = seq.tokens[t];
    if (!is_q[z]) continue;
    seq.is_trigger[t] = true;
    seq.occurrence[t] = ++seen[z];
    if (!seq.triggers.empty() && z == seq.triggers[0] && seen[z] == 1 && t + 1 < T) seq.first_output_pos = t + 1;
  }
}

}  // namespace bil
