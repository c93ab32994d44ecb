// End-to-end acceptance checks. Each criterion prints one line
//   criterion N: PASS|FAIL  <measurements>
// and the process exits nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bil/embeddings.hpp"
#include "bil/experiment.hpp"
#include "bil/grad.hpp"
#include "bil/memories.hpp"
#include "bil/theory.hpp"
#include "bil/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bil {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects named checks into one verdict and a compact detail string.
class Verdict {
 public:
  void check(const std::string& name, bool ok, const std::string& value) {
    pass_ = pass_ && ok;
    if (!detail_.empty()) detail_ += "  ";
    detail_ += name + "=" + value + (ok ? "" : "(!)");
  }
  void note(const std::string& name, const std::string& value) {
    if (!detail_.empty()) detail_ += "  ";
    detail_ += name + "=" + value;
  }
  [[nodiscard]] Outcome outcome() const { return {pass_, detail_}; }

 private:
  bool pass_ = true;
  std::string detail_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Raised from a training callback once the wall-clock budget is spent.
struct BudgetReached {};

// Trains until `iters` or the budget, whichever comes first. Every logged row
// is measured on a fresh batch before it is used for an update, so the last
// row seen is an honest evaluation of the final weights.
std::vector<MetricsRow> train_with_budget(const MarkovSpec& spec, const TriggerConfig& trig, const Geometry& g,
                                          const TrainConfig& cfg, double budget_seconds) {
  std::vector<MetricsRow> rows;
  const auto start = Clock::now();
  try {
    train_loop(spec, trig, g, cfg, std::nullopt, [&](const MetricsRow& row) {
      rows.push_back(row);
      if (seconds_since(start) > budget_seconds) throw BudgetReached{};
    });
  } catch (const BudgetReached&) {
  }
  return rows;
}

const MetricsRow& row_at(const std::vector<MetricsRow>& rows, int iter) {
  for (const auto& r : rows)
    if (r.iter == iter) return r;
  throw std::runtime_error("no metrics row at iteration " + std::to_string(iter));
}

// Freeze-experiment setting: random triggers drawn from the unigram, uniform outputs,
// no feed-forward layer and the loss restricted to in-context positions.
struct FreezeSetting {
  MarkovSpec spec = synthetic_markov(65, 0.1, RngStream(0).child("markov"));
  TriggerConfig trig;
  Geometry g;
  TrainConfig cfg;

  FreezeSetting() {
    trig.K = 5;
    g.d = 128;
    g.N = 65;
    g.T = 128;
    g.use_ff = false;
    cfg.eta = 0.2;
    cfg.momentum = 0.9;
    cfg.weight_decay = 1e-4;
    cfg.batch_size = 128;
    cfg.mask = MaskMode::InContextOnly;
  }
};

// ---------------------------------------------------------------------------

Outcome criterion1() {
  Verdict v;
  const ModelParams p = init_params(16, 5, 8, TrainableInit::Gaussian, true, RngStream(1).child("params"));
  TriggerConfig trig;
  trig.K = 1;
  const SequenceSampler sampler(uniform_markov(5), trig);
  // The in-context mask needs at least one supervised position.
  std::vector<TaggedSequence> batch;
  for (std::uint64_t i = 0;; ++i) {
    batch = sampler.sample_batch(8, 4, RngStream(1).child("data").child(i));
    const bool any = std::any_of(batch.begin(), batch.end(), [](const TaggedSequence& s) {
      for (int t = 0; t < s.length(); ++t)
        if (s.in_context(t)) return true;
      return false;
    });
    if (any) break;
  }
  const auto coords = sample_coordinates(p, 200, RngStream(2));
  for (MaskMode mode : {MaskMode::All, MaskMode::InContextOnly}) {
    const GradcheckReport r = gradcheck(p, batch, mode, coords, 1e-4);
    v.check(mode == MaskMode::All ? "max_rel_err_all" : "max_rel_err_icl", r.passed(), fmt(r.max_rel_err));
  }
  v.note("coords", std::to_string(coords.size()));
  return v.outcome();
}

Outcome criterion2() {
  Verdict v;
  const int N = 3, d = 8;
  const Matrix W_E = gaussian_matrix(d, N, 1.0 / d, RngStream(1));
  const Matrix W_U = gaussian_matrix(N, d, 1.0 / d, RngStream(2));
  const Matrix W = gaussian_matrix(d, d, 1.0, RngStream(3));
  Matrix joint = gaussian_matrix(N, N, 1.0, RngStream(4)).array().abs();
  joint /= joint.sum();
  const Matrix exact = lemma1_gradient_exact(W, joint, W_E, W_U);
  const Matrix enumerated = readout_backward(W, W_E, W_U, joint_examples(joint));
  const double diff = (exact - enumerated).cwiseAbs().maxCoeff();
  v.check("max_abs_diff", diff <= 1e-10, fmt(diff, 3));
  return v.outcome();
}

Outcome criterion3() {
  Verdict v;
  const MarkovSpec spec = synthetic_markov(65, 0.1, RngStream(0).child("markov"));
  TriggerConfig trig;
  trig.mode = TriggerMode::Fixed;
  trig.K = 3;
  trig.fixed_set = fixed_triggers(spec, 3, 0);
  Geometry g;
  g.d = 256;
  g.N = 65;
  g.T = 128;
  OracleConfig cfg;
  cfg.beta = 20.0;
  cfg.exclude_triggers_from_wf = true;
  cfg.use_ff = true;
  const OracleReport r = oracle_model_eval(spec, trig, g, cfg, 50, 64, RngStream(0));
  v.check("acc_icl", r.metrics.acc_icl && *r.metrics.acc_icl >= 0.99, fmt(r.metrics.acc_icl.value_or(-1)));
  v.note("icl_positions", std::to_string(r.icl_positions));
  // Same memories without the feed-forward term, for the record.
  cfg.use_ff = false;
  const OracleReport bare = oracle_model_eval(spec, trig, g, cfg, 50, 64, RngStream(0));
  v.note("acc_icl_without_wf", fmt(bare.metrics.acc_icl.value_or(-1)));
  return v.outcome();
}

Outcome criterion4() {
  Verdict v;
  FreezeSetting s;
  s.cfg.iters = 3000;
  s.cfg.seed = 1;
  const auto rows = train_with_budget(s.spec, s.trig, s.g, s.cfg, 15 * 60.0);
  const MetricsRow& last = rows.back();
  v.note("iterations", std::to_string(last.iter));
  v.check("acc_icl", last.acc_icl.value_or(0) >= 0.9, fmt(last.acc_icl.value_or(-1)));
  v.check("recall_wo2", last.recall_wo2.value_or(0) >= 0.8, fmt(last.recall_wo2.value_or(-1)));
  v.check("recall_wk2", last.recall_wk2.value_or(0) >= 0.8, fmt(last.recall_wk2.value_or(-1)));
  v.check("recall_wk1_early", last.recall_wk1_early.value_or(0) >= 0.8, fmt(last.recall_wk1_early.value_or(-1)));
  return v.outcome();
}

Outcome criterion5() {
  Verdict v;
  const auto start = Clock::now();
  const int phase = 300;

  // (a) Keys trained while W_O2 stays at its random initialization.
  FreezeSetting a;
  a.cfg.iters = phase;
  a.cfg.seed = 2;
  a.cfg.freeze = {{"W_O2", phase}};
  const TrainResult ra = train_loop(a.spec, a.trig, a.g, a.cfg);
  const ModelParams init = init_params(a.g.d, a.g.N, a.g.T, a.g.init, a.g.use_ff, RngStream(a.cfg.seed).child("params"));
  const double chance = 1.0 / static_cast<double>(target_memory_specs(init, a.trig, a.spec).wk2.candidate_ids.size());
  const double wk2 = ra.log.back().recall_wk2.value_or(1.0);
  v.check("a_recall_wk2", wk2 <= chance + 0.1, fmt(wk2));

  // (b) W_O2 alone until it has been learned, then (c) everything unfrozen.
  // The W_O2-only phase is checked at the first row where recall_wo2 reaches
  // 0.9, or at its end if it never does.
  const int o2_phase = 2 * phase;
  FreezeSetting b;
  b.cfg.iters = 3000;
  b.cfg.seed = 2;
  b.cfg.freeze = {{"W_K1", o2_phase}, {"W_K2", o2_phase}};
  const auto rows = train_with_budget(b.spec, b.trig, b.g, b.cfg, 20 * 60.0 - seconds_since(start));
  const MetricsRow* mid = &row_at(rows, o2_phase);
  for (const auto& r : rows) {
    if (r.iter > o2_phase) break;
    if (r.recall_wo2.value_or(0) >= 0.9) {
      mid = &r;
      break;
    }
  }
  v.note("b_iteration", std::to_string(mid->iter));
  v.check("b_recall_wo2", mid->recall_wo2.value_or(0) >= 0.9, fmt(mid->recall_wo2.value_or(-1)));
  v.check("b_acc_icl", mid->acc_icl.value_or(1) <= 0.6, fmt(mid->acc_icl.value_or(-1)));
  const MetricsRow& last = rows.back();
  v.check("c_acc_icl", last.acc_icl.value_or(0) >= 0.9, fmt(last.acc_icl.value_or(-1)));
  v.note("c_iterations", std::to_string(last.iter));
  return v.outcome();
}

Outcome criterion6() {
  Verdict v;
  // Same vocabulary as the one-step recall example of the theory module.
  const MarkovSpec spec = uniform_markov(20);
  TriggerConfig trig;
  trig.K = 1;
  const int seeds = 5;
  auto mean_r1 = [&](int d, int n_batches) {
    double sum = 0.0;
    for (int s = 0; s < seeds; ++s) {
      R1Setup setup;
      setup.d = d;
      setup.T = 256;
      setup.batch_size = 32;
      setup.n_batches = n_batches;
      sum += r1_recall(spec, trig, setup, RngStream(static_cast<std::uint64_t>(s)));
    }
    return sum / seeds;
  };
  const double top = mean_r1(256, 64);
  v.check("r1_d256_b64", top >= 0.9, fmt(top));

  auto monotone = [&](const std::string& name, const std::vector<double>& values) {
    bool ok = true;
    std::string text;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i > 0 && values[i] < values[i - 1] - 0.05) ok = false;
      text += (i ? "/" : "") + fmt(values[i], 3);
    }
    v.check(name, ok, text);
  };
  std::vector<double> along_d, along_b;
  for (int d : {32, 64, 128}) along_d.push_back(mean_r1(d, 64));
  along_d.push_back(top);
  for (int b : {1, 4, 16}) along_b.push_back(mean_r1(256, b));
  along_b.push_back(top);
  monotone("r1_along_d", along_d);
  monotone("r1_along_batches", along_b);
  return v.outcome();
}

Outcome criterion7() {
  Verdict v;
  CurriculumConfig cfg;
  cfg.d = 512;
  cfg.N = 50;
  cfg.T = 32;
  cfg.samples_per_step = 100000;
  const CurriculumReport r = three_step_curriculum(cfg);
  v.check("recall_wo2", r.recall_wo2 >= 0.8, fmt(r.recall_wo2));
  v.check("recall_wk2", r.recall_wk2 >= 0.8, fmt(r.recall_wk2));
  v.check("recall_wk1", r.recall_wk1 >= 0.8, fmt(r.recall_wk1));
  v.check("acc_icl", r.eval.acc_icl.value_or(0) >= 0.8, fmt(r.eval.acc_icl.value_or(-1)));

  cfg.reversed = true;
  const CurriculumReport rev = three_step_curriculum(cfg);
  const double chance = 1.0 / cfg.N;
  v.check("reversed_recall_wk2", rev.recall_wk2 <= chance + 0.1, fmt(rev.recall_wk2));
  return v.outcome();
}

Outcome criterion8() {
  Verdict v;
  const MarkovSpec spec = synthetic_markov(65, 0.1, RngStream(0).child("markov"));
  Geometry g;
  g.d = 128;
  g.N = 65;
  g.T = 128;
  TrainConfig cfg;
  cfg.eta = 1.0;
  cfg.batch_size = 64;
  cfg.iters = 300;
  cfg.probe_every = cfg.iters;
  auto triggers = [](OutputMode mode) {
    TriggerConfig t;
    t.K = 3;
    t.output_mode = mode;
    return t;
  };
  const TriggerConfig uniform_out = triggers(OutputMode::Uniform);
  const TriggerConfig bigram_out = triggers(OutputMode::Bigram);
  const OracleConfig eval_cfg;
  const int seeds = 5;
  double uniform_on_bigram = 0.0, bigram_on_uniform = 0.0;
  for (int s = 0; s < seeds; ++s) {
    cfg.seed = static_cast<std::uint64_t>(100 + s);
    const RngStream test = RngStream(cfg.seed).child("test");
    const ModelParams pu = train_loop(spec, uniform_out, g, cfg).params;
    const ModelParams pb = train_loop(spec, bigram_out, g, cfg).params;
    uniform_on_bigram += *evaluate_oracle(pu, spec, bigram_out, eval_cfg, 4, 64, test).metrics.acc_icl;
    bigram_on_uniform += *evaluate_oracle(pb, spec, uniform_out, eval_cfg, 4, 64, test).metrics.acc_icl;
  }
  uniform_on_bigram /= seeds;
  bigram_on_uniform /= seeds;
  v.check("uniform_trained_on_bigram_minus_bigram_trained_on_uniform", uniform_on_bigram >= bigram_on_uniform,
          fmt(uniform_on_bigram) + "-" + fmt(bigram_on_uniform));
  return v.outcome();
}

Outcome criterion9() {
  Verdict v;
  const int seeds = 20, n = 65;
  int norms_ok = 0, offdiag_ok = 0, remap_ok = 0, remap_norm_ok = 0, cross_ok = 0, factored_ok = 0, empty_ok = 0;
  double scaled_min = 1e300, scaled_max = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const RngStream root(static_cast<std::uint64_t>(s));
    const Matrix small = gaussian_matrix(128, n, 1.0 / 128, root.child("norms"));
    const auto norms = small.colwise().norm().array();
    norms_ok += (norms >= 0.7).all() && (norms <= 1.3).all();

    const EmbeddingSet big = EmbeddingSet::gaussian(1024, n, root.child("E"));
    const double off_big = orthogonality_report(big).mean_abs_offdiag;
    const double off_tiny = orthogonality_report(EmbeddingSet::gaussian(16, n, root.child("E16"))).mean_abs_offdiag;
    offdiag_ok += off_big <= 3.0 / std::sqrt(1024.0) && off_tiny >= 4.0 * off_big;
    for (int d : {64, 256, 1024}) {
      const double scaled =
          orthogonality_report(EmbeddingSet::gaussian(d, n, root.child("scale").child(d))).mean_abs_offdiag *
          std::sqrt(static_cast<double>(d));
      scaled_min = std::min(scaled_min, scaled);
      scaled_max = std::max(scaled_max, scaled);
    }

    const Matrix W0 = gaussian_matrix(1024, 1024, 1.0 / 1024, root.child("W0"));
    const OrthoStats remap = remap_report(W0, big);
    remap_ok += remap.self_remap_mean_abs <= 0.1;
    remap_norm_ok += remap.min_norm >= 0.7 && remap.max_norm <= 1.3;
    const Matrix U = gaussian_matrix(1024, n, 1.0 / 1024, root.child("U"));
    cross_ok += mean_abs_cross(W0 * big.vectors, U) <= 5.0 / std::sqrt(1024.0);

    const Matrix X = gaussian_matrix(2048, 20, 1.0 / 2048, root.child("X"));
    const Matrix Y = gaussian_matrix(2048, 20, 1.0 / 2048, root.child("Y"));
    const FactoredReport f = factored_memory_report(X, Y, 512, root.child("factored"));
    // Entries carry about 0.07 of cross-talk, so the +-0.2 bands are 3-sigma
    // per entry: a seed passes when every stored pair beats every unstored
    // one and at least 99% of entries lie inside their band.
    const Index n_pairs = f.scores.rows();
    long inside = 0;
    for (Index k = 0; k < n_pairs; ++k)
      for (Index l = 0; l < n_pairs; ++l)
        inside += k == l ? std::abs(f.scores(k, l) - 1.0) <= 0.2 : std::abs(f.scores(k, l)) <= 0.2;
    factored_ok += f.diag_min > f.offdiag_max_abs && inside >= 0.99 * static_cast<double>(n_pairs * n_pairs);
    const FactoredReport none = factored_memory_report(X, Y, 512, root.child("factored"), 0);
    empty_ok += none.scores.cwiseAbs().maxCoeff() <= 0.1;
  }
  auto all = [&](const std::string& name, int count) {
    v.check(name, count == seeds, std::to_string(count) + "/" + std::to_string(seeds));
  };
  // Column norms: at least 99% of seeds, i.e. all 20 here.
  all("norm_concentration", norms_ok);
  all("offdiag_scaling", offdiag_ok);
  v.check("sqrt_d_times_offdiag_spread", scaled_max <= 2.0 * scaled_min, fmt(scaled_max / scaled_min, 3));
  all("remap_self", remap_ok);
  all("remap_norms", remap_norm_ok);
  all("remap_cross", cross_ok);
  all("factored_diagonal", factored_ok);
  all("factored_empty", empty_ok);
  return v.outcome();
}

// Drops the wall_seconds column of a metrics CSV.
std::string without_wall_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion10(const fs::path& scratch) {
  Verdict v;
  const std::vector<json> configs = {
      {{"experiment", "train"},
       {"geometry", {{"d", 32}, {"T", 32}}},
       {"markov", {{"N", 12}}},
       {"triggers", {{"K", 2}}},
       {"train", {{"iters", 20}, {"batch_size", 8}}}},
      {{"experiment", "oracle"}, {"geometry", {{"d", 64}, {"T", 32}}}, {"markov", {{"N", 12}}},
       {"oracle", {{"eval_batches", 2}, {"batch_size", 8}}}},
      {{"experiment", "theory_onestep"}, {"geometry", {{"d", 32}, {"T", 32}}}, {"markov", {{"source", "uniform"}, {"N", 8}}},
       {"triggers", {{"K", 1}}}, {"theory", {{"n_batches", 2}, {"batch_size", 8}}}},
      {{"experiment", "gradcheck"}, {"gradcheck", {{"per_matrix", 5}}}},
      {{"experiment", "data_stats"}, {"markov", {{"N", 10}}}},
      {{"experiment", "sweep"},
       {"markov", {{"source", "uniform"}, {"N", 5}}},
       {"triggers", {{"K", 1}}},
       {"geometry", {{"T", 32}}},
       {"theory", {{"kind", "r1"}, {"n_batches", 2}, {"batch_size", 4}}},
       {"sweep", {{"experiment", "theory_onestep"}, {"axis", "d"}, {"values", {16, 32}}}}},
  };
  int identical = 0, files = 0;
  std::string mismatches;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const fs::path a = scratch / ("c10_" + std::to_string(i)) / "first";
    const fs::path b = scratch / ("c10_" + std::to_string(i)) / "second";
    fs::remove_all(a.parent_path());
    run_experiment(resolve_config(configs[i]), a);
    run_experiment(resolve_config(json::parse(slurp(a / "resolved_config.json"))), b);
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), a);
      std::string x = slurp(entry.path()), y = slurp(b / rel);
      if (rel.filename() == "metrics.csv") {
        x = without_wall_seconds(x);
        y = without_wall_seconds(y);
      }
      ++files;
      if (x == y && fs::exists(b / rel))
        ++identical;
      else
        mismatches += " " + configs[i]["experiment"].get<std::string>() + "/" + rel.string();
    }
  }
  v.check("identical_files", identical == files && files > 0, std::to_string(identical) + "/" + std::to_string(files));
  if (!mismatches.empty()) v.note("differs", mismatches);
  return v.outcome();
}

}  // namespace
}  // namespace bil

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  std::string scratch = (fs::temp_directory_path() / "bil_acceptance").string();
  app.add_option("--criterion", only, "Run a single criterion (1-10); all when omitted")->check(CLI::Range(1, 10));
  app.add_option("--scratch", scratch, "Directory for experiment artifacts");
  CLI11_PARSE(app, argc, argv);

  using bil::Outcome;
  const std::vector<std::function<Outcome()>> criteria = {
      bil::criterion1, bil::criterion2, bil::criterion3, bil::criterion4, bil::criterion5,
      bil::criterion6, bil::criterion7, bil::criterion8, bil::criterion9,
      [&] { return bil::criterion10(scratch); },
  };
  fs::create_directories(scratch);
  bool all_pass = true;
  for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) {
    if (only != 0 && only != i) continue;
    const auto start = bil::Clock::now();
    Outcome o;
    try {
      o = criteria[i - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all_pass = all_pass && o.pass;
    std::printf("criterion %d: %s  %s  (%.1f s)\n", i, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                bil::seconds_since(start));
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
