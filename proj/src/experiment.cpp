#include "bil/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>

#include "bil/datagen.hpp"
#include "bil/errors.hpp"
#include "bil/grad.hpp"
#include "bil/memories.hpp"
#include "bil/model.hpp"
#include "bil/probes.hpp"
#include "bil/theory.hpp"
#include "bil/train.hpp"

namespace bil {

using nlohmann::json;
namespace fs = std::filesystem;

ConfigError::ConfigError(std::string field, const std::string& message)
    : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

json default_config() {
  return json::parse(R"({
    "experiment": "train",
    "seed": 0,
    "output_dir": "out",
    "geometry": {"d": 128, "N": null, "T": 128, "use_ff": true, "attn_scale": 1.0, "init": "gaussian"},
    "markov": {"source": "synthetic", "corpus_path": null, "N": 65, "concentration": 0.1, "seed": 0},
    "triggers": {"mode": "random", "K": 5, "outputs": "uniform", "rank_offset": 0},
    "train": {"eta": 0.2, "momentum": 0.9, "weight_decay": 0.0001, "batch_size": 128, "iters": 2000,
              "mask": "all", "freeze": {}, "probe_every": 1, "kl_eps": 1e-06, "wk2_support": "trigger_support"},
    "oracle": {"beta": 20.0, "exclude_triggers_from_wf": true, "eval_batches": 50, "batch_size": 64},
    "theory": {"kind": "r1", "eta": 1.0, "n_batches": 64, "batch_size": 32, "sequences": 10000, "fd_coords": 0},
    "curriculum": {"d": 512, "N": 50, "T": 32, "eta_o2": 1.0, "eta_k2": 1.0, "eta_k1": 1.0,
                   "samples_per_step": 100000, "beta": 20.0, "reversed": false,
                   "eval_batches": 20, "eval_batch_size": 64},
    "gradcheck": {"d": 16, "N": 5, "T": 8, "batch_size": 4, "per_matrix": 200, "tol": 0.0001, "eps": 1e-05},
    "sweep": {"experiment": "theory_onestep", "axis": "d", "values": []}
  })");
}

json error_document(const std::string& kind, const std::string& message, const std::string& field) {
  json e = {{"status", "error"}, {"kind", kind}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return e;
}

void apply_override(json& doc, const std::string& key, const std::string& value) {
  if (key.empty()) throw ConfigError(key, "empty override key");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(key, "malformed override key");
    if (!node->is_object()) throw ConfigError(key, "override descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

namespace {

// ---------------------------------------------------------------------------
// Schema

bool compatible(const json& def, const json& val) {
  if (def.is_null()) return val.is_null() || val.is_number() || val.is_string();
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_number_integer() || def.is_number_unsigned()) return val.is_number_integer() || val.is_number_unsigned();
  if (def.is_number()) return val.is_number();
  if (def.is_string()) return val.is_string();
  if (def.is_array()) return val.is_array();
  if (def.is_object()) return val.is_object();
  return false;
}

// Open maps whose keys are not listed in the defaults.
bool open_map(const std::string& path) { return path == "train.freeze"; }

void merge_checked(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, val] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError(path, "unknown key");
    json& def = base[key];
    if (!compatible(def, val)) throw ConfigError(path, "expected " + std::string(def.type_name()) + ", got " +
                                                           std::string(val.type_name()));
    if (def.is_object() && !open_map(path))
      merge_checked(def, val, path);
    else
      def = val;
  }
}

template <class T>
T get(const json& doc, const std::string& path) {
  const json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    node = &node->at(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return node->get<T>();
}

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

void require_positive(const json& doc, const std::string& path) {
  require(get<double>(doc, path) > 0, path, "must be positive");
}

void require_nonnegative(const json& doc, const std::string& path) {
  require(get<double>(doc, path) >= 0, path, "must be non-negative");
}

void require_one_of(const json& doc, const std::string& path, std::initializer_list<const char*> options) {
  const auto v = get<std::string>(doc, path);
  for (const char* o : options)
    if (v == o) return;
  std::string list;
  for (const char* o : options) list += std::string(list.empty() ? "" : "|") + o;
  throw ConfigError(path, "must be one of " + list);
}

const std::vector<std::string> kExperiments = {"train",     "oracle",     "theory_onestep", "theory_threestep",
                                               "gradcheck", "data_stats", "sweep"};

// ---------------------------------------------------------------------------
// Construction of module configs

MarkovSpec build_markov(const json& cfg) {
  const auto source = get<std::string>(cfg, "markov.source");
  if (source == "uniform") return uniform_markov(get<int>(cfg, "markov.N"));
  if (source == "synthetic")
    return synthetic_markov(get<int>(cfg, "markov.N"), get<double>(cfg, "markov.concentration"),
                            RngStream(get<std::uint64_t>(cfg, "markov.seed")).child("markov"));
  const auto path = get<std::string>(cfg, "markov.corpus_path");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("markov.corpus_path", "cannot read " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return estimate_markov(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("markov.corpus_path", e.what());
  }
}

TriggerConfig build_triggers(const json& cfg, const MarkovSpec& spec) {
  TriggerConfig t;
  t.K = get<int>(cfg, "triggers.K");
  t.output_mode = get<std::string>(cfg, "triggers.outputs") == "bigram" ? OutputMode::Bigram : OutputMode::Uniform;
  try {
    if (get<std::string>(cfg, "triggers.mode") == "fixed") {
      t.mode = TriggerMode::Fixed;
      t.fixed_set = fixed_triggers(spec, t.K, get<int>(cfg, "triggers.rank_offset"));
    } else {
      t.mode = TriggerMode::Random;
    }
    t.validate(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("triggers", e.what());
  }
  return t;
}

Geometry build_geometry(const json& cfg, int N) {
  Geometry g;
  g.d = get<int>(cfg, "geometry.d");
  g.N = N;
  g.T = get<int>(cfg, "geometry.T");
  g.use_ff = get<bool>(cfg, "geometry.use_ff");
  g.attn_scale = get<double>(cfg, "geometry.attn_scale");
  g.init = get<std::string>(cfg, "geometry.init") == "zeros" ? TrainableInit::Zeros : TrainableInit::Gaussian;
  return g;
}

Wk2Support build_support(const json& cfg) {
  return get<std::string>(cfg, "train.wk2_support") == "full_vocabulary" ? Wk2Support::FullVocabulary
                                                                         : Wk2Support::TriggerSupport;
}

TrainConfig build_train(const json& cfg) {
  TrainConfig t;
  t.eta = get<double>(cfg, "train.eta");
  t.momentum = get<double>(cfg, "train.momentum");
  t.weight_decay = get<double>(cfg, "train.weight_decay");
  t.batch_size = get<int>(cfg, "train.batch_size");
  t.iters = get<int>(cfg, "train.iters");
  t.mask = get<std::string>(cfg, "train.mask") == "in_context_only" ? MaskMode::InContextOnly : MaskMode::All;
  for (const auto& [name, it] : cfg.at("train").at("freeze").items()) {
    if (!it.is_number_integer() && !it.is_number_unsigned())
      throw ConfigError("train.freeze." + name, "expected an iteration number");
    t.freeze[name] = it.get<int>();
  }
  t.probe_every = get<int>(cfg, "train.probe_every");
  t.seed = get<std::uint64_t>(cfg, "seed");
  t.kl_eps = get<double>(cfg, "train.kl_eps");
  t.wk2_support = build_support(cfg);
  return t;
}

OracleConfig build_oracle(const json& cfg) {
  OracleConfig o;
  o.beta = get<double>(cfg, "oracle.beta");
  o.exclude_triggers_from_wf = get<bool>(cfg, "oracle.exclude_triggers_from_wf");
  o.use_ff = get<bool>(cfg, "geometry.use_ff");
  o.kl_eps = get<double>(cfg, "train.kl_eps");
  o.wk2_support = build_support(cfg);
  return o;
}

CurriculumConfig build_curriculum(const json& cfg) {
  CurriculumConfig c;
  c.d = get<int>(cfg, "curriculum.d");
  c.N = get<int>(cfg, "curriculum.N");
  c.T = get<int>(cfg, "curriculum.T");
  c.eta_o2 = get<double>(cfg, "curriculum.eta_o2");
  c.eta_k2 = get<double>(cfg, "curriculum.eta_k2");
  c.eta_k1 = get<double>(cfg, "curriculum.eta_k1");
  c.samples_per_step = get<long>(cfg, "curriculum.samples_per_step");
  c.beta = get<double>(cfg, "curriculum.beta");
  c.reversed = get<bool>(cfg, "curriculum.reversed");
  c.eval_batches = get<int>(cfg, "curriculum.eval_batches");
  c.eval_batch_size = get<int>(cfg, "curriculum.eval_batch_size");
  c.seed = get<std::uint64_t>(cfg, "seed");
  return c;
}

// Path of the config key that a sweep axis controls.
std::string axis_key(const std::string& experiment, const std::string& axis) {
  if (axis == "d") return experiment == "theory_threestep" ? "curriculum.d" : "geometry.d";
  if (axis == "K" && experiment != "theory_threestep" && experiment != "gradcheck") return "triggers.K";
  if (axis == "n_batches" && experiment == "theory_onestep") return "theory.n_batches";
  if (axis == "eta" && experiment == "train") return "train.eta";
  if (axis == "eta" && experiment == "theory_onestep") return "theory.eta";
  throw ConfigError("sweep.axis", "axis " + axis + " does not apply to experiment " + experiment);
}

void validate_ranges(const json& cfg) {
  const auto experiment = get<std::string>(cfg, "experiment");
  if (std::find(kExperiments.begin(), kExperiments.end(), experiment) == kExperiments.end())
    throw ConfigError("experiment", "unknown experiment " + experiment);
  for (const char* p : {"geometry.d", "geometry.T", "geometry.attn_scale", "markov.N", "markov.concentration",
                        "triggers.K", "train.eta", "train.batch_size", "train.probe_every", "train.kl_eps",
                        "oracle.beta", "oracle.eval_batches", "oracle.batch_size", "theory.eta",
                        "theory.n_batches", "theory.batch_size", "theory.sequences", "curriculum.d",
                        "curriculum.N", "curriculum.T", "curriculum.beta", "curriculum.eval_batches",
                        "curriculum.eval_batch_size", "gradcheck.d", "gradcheck.N", "gradcheck.T",
                        "gradcheck.batch_size", "gradcheck.per_matrix", "gradcheck.tol", "gradcheck.eps"})
    require_positive(cfg, p);
  for (const char* p : {"train.weight_decay", "train.iters", "triggers.rank_offset", "theory.fd_coords",
                        "curriculum.eta_o2", "curriculum.eta_k2", "curriculum.eta_k1", "curriculum.samples_per_step"})
    require_nonnegative(cfg, p);
  const double momentum = get<double>(cfg, "train.momentum");
  require(momentum >= 0 && momentum < 1, "train.momentum", "must lie in [0, 1)");
  require_one_of(cfg, "geometry.init", {"gaussian", "zeros"});
  require_one_of(cfg, "markov.source", {"synthetic", "uniform", "corpus"});
  require_one_of(cfg, "triggers.mode", {"random", "fixed"});
  require_one_of(cfg, "triggers.outputs", {"uniform", "bigram"});
  require_one_of(cfg, "train.mask", {"all", "in_context_only"});
  require_one_of(cfg, "train.wk2_support", {"trigger_support", "full_vocabulary"});
  require_one_of(cfg, "theory.kind", {"r1", "wo2", "lemma3", "lemma4", "illustrative"});
  if (get<std::string>(cfg, "markov.source") == "corpus")
    require(cfg["markov"]["corpus_path"].is_string(), "markov.corpus_path", "required for a corpus source");
  const std::vector<std::string> trainable = {"W_K1", "W_K2", "W_O2", "W_F"};
  for (const auto& [name, it] : cfg["train"]["freeze"].items()) {
    require(std::find(trainable.begin(), trainable.end(), name) != trainable.end(), "train.freeze." + name,
            "not a trainable matrix");
    require(it.is_number_integer() && it.get<long>() >= 0, "train.freeze." + name, "expected an iteration >= 0");
  }
  if (experiment == "sweep") {
    const auto sub = get<std::string>(cfg, "sweep.experiment");
    require(sub != "sweep" && std::find(kExperiments.begin(), kExperiments.end(), sub) != kExperiments.end(),
            "sweep.experiment", "must name a non-sweep experiment");
    require(!cfg["sweep"]["values"].empty(), "sweep.values", "must not be empty");
    for (const auto& v : cfg["sweep"]["values"]) require(v.is_number(), "sweep.values", "values must be numbers");
    (void)axis_key(sub, get<std::string>(cfg, "sweep.axis"));
  }
}

// ---------------------------------------------------------------------------
// Output helpers

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const LossMetrics& m) {
  return {{"loss_all", opt(m.loss_all)}, {"loss_global", opt(m.loss_global)}, {"loss_icl", opt(m.loss_icl)},
          {"acc_icl", opt(m.acc_icl)},   {"acc_all", opt(m.acc_all)}};
}

json score_json(const ScoreTable& t) {
  return {{"diag_mean", t.diag_mean},
          {"offdiag_mean", t.offdiag_mean},
          {"offdiag_abs_mean", t.offdiag_abs_mean},
          {"offdiag_abs_max", t.offdiag_abs_max}};
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_matrix_csv(const fs::path& path, const Matrix& m) {
  std::string text;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) text += ',';
      text += format_number(m(i, j));
    }
    text += '\n';
  }
  write_text(path, text);
}

// First logged iteration at which a probe column reaches the level.
json first_crossing(const std::vector<MetricsRow>& log, std::optional<double> MetricsRow::*field, double level) {
  for (const auto& row : log)
    if ((row.*field) && *(row.*field) >= level) return row.iter;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Experiments

json run_train(const json& cfg, const fs::path& out) {
  const MarkovSpec spec = build_markov(cfg);
  const TriggerConfig trig = build_triggers(cfg, spec);
  const Geometry geometry = build_geometry(cfg, spec.N);
  const TrainConfig tc = build_train(cfg);
  const TrainResult result = train_loop(spec, trig, geometry, tc);
  write_metrics_csv(result.log, (out / "metrics.csv").string());
  save_checkpoint(result.params, (out / "checkpoint.bin").string());

  const SequenceSampler sampler(spec, trig);
  const RngStream root(tc.seed);
  const TaggedSequence seq = sampler.sample(geometry.T, root.child("heatmap"));
  const ForwardTrace trace = forward(result.params, seq.tokens);
  attention_heatmap_export(trace, 1, (out / "attention_layer1.pgm").string());
  attention_heatmap_export(trace, 2, (out / "attention_layer2.pgm").string());

  const MetricsRow& last = result.log.back();
  return {{"iter", last.iter},
          {"loss_all", opt(last.loss_all)},
          {"loss_global", opt(last.loss_global)},
          {"loss_icl", opt(last.loss_icl)},
          {"acc_icl", opt(last.acc_icl)},
          {"recall_wk1_full", opt(last.recall_wk1_full)},
          {"recall_wk1_early", opt(last.recall_wk1_early)},
          {"recall_wk2", opt(last.recall_wk2)},
          {"recall_wo2", opt(last.recall_wo2)},
          {"kl_wf", opt(last.kl_wf)},
          {"iters_to_wo2_0.9", first_crossing(result.log, &MetricsRow::recall_wo2, 0.9)},
          {"iters_to_wk2_0.9", first_crossing(result.log, &MetricsRow::recall_wk2, 0.9)},
          {"iters_to_wk1_early_0.9", first_crossing(result.log, &MetricsRow::recall_wk1_early, 0.9)}};
}

json run_oracle(const json& cfg, const fs::path&) {
  const MarkovSpec spec = build_markov(cfg);
  const TriggerConfig trig = build_triggers(cfg, spec);
  const Geometry geometry = build_geometry(cfg, spec.N);
  const OracleReport r = oracle_model_eval(spec, trig, geometry, build_oracle(cfg), get<int>(cfg, "oracle.eval_batches"),
                                           get<int>(cfg, "oracle.batch_size"), RngStream(get<std::uint64_t>(cfg, "seed")));
  json s = metrics_json(r.metrics);
  s["kl_wf"] = opt(r.kl_wf);
  s["smoothed_entropy_rate"] = r.smoothed_entropy_rate;
  s["icl_positions"] = r.icl_positions;
  return s;
}

json run_theory_onestep(const json& cfg, const fs::path& out) {
  const MarkovSpec spec = build_markov(cfg);
  const TriggerConfig trig = build_triggers(cfg, spec);
  const RngStream root(get<std::uint64_t>(cfg, "seed"));
  const int d = get<int>(cfg, "geometry.d");
  const int T = get<int>(cfg, "geometry.T");
  const double eta = get<double>(cfg, "theory.eta");
  const int n_batches = get<int>(cfg, "theory.n_batches");
  const int batch_size = get<int>(cfg, "theory.batch_size");
  const auto kind = get<std::string>(cfg, "theory.kind");

  if (kind == "r1") {
    const R1Setup setup{d, T, batch_size, n_batches};
    return {{"kind", kind}, {"recall", r1_recall(spec, trig, setup, root)}};
  }
  if (kind == "illustrative") {
    const IllustrativeReport r = illustrative_one_step_w1(eta, spec.N, T, d, root);
    return {{"kind", kind},
            {"accuracy", r.accuracy},
            {"true_score_mean", r.true_score_mean},
            {"wrong_score_abs_mean", r.wrong_score_abs_mean},
            {"positional_abs_mean", r.positional_abs_mean},
            {"positional_abs_max", r.positional_abs_max}};
  }

  ModelParams params = init_params(d, spec.N, T, TrainableInit::Zeros, false, root.child("params"));
  const SequenceSampler sampler(spec, trig);
  if (kind == "wo2") {
    const auto m = estimate_moments(params, sampler, Featurizer::TokenAverage, n_batches, batch_size, root.child("data"));
    const OneStepReport r = one_step_wo2(eta, params, m);
    write_matrix_csv(out / "scores_primary.csv", r.primary.scores);
    write_matrix_csv(out / "scores_secondary.csv", r.secondary.scores);
    return {{"kind", kind},
            {"recall", r.recall},
            {"observed_classes", r.observed_classes},
            {"tau_hat", r.tau_hat},
            {"primary", score_json(r.primary)},
            {"secondary", score_json(r.secondary)}};
  }

  const TargetMatrices targets = build_target_memories(params, trig, spec, false);
  const auto seqs = sample_theory_batch(sampler, T, get<long>(cfg, "theory.sequences"), root.child("data"));
  params.W_O2 = targets.W_O2;
  if (kind == "lemma3") {
    const Lemma3Report r = lemma3_gradient_wk2(params, seqs);
    write_matrix_csv(out / "scores_step.csv", r.step_scores.scores);
    return {{"kind", kind}, {"max_abs_diff", r.max_abs_diff}, {"step", score_json(r.step_scores)}};
  }
  params.W_K2 = targets.W_K2;
  const Lemma4Report r = lemma4_gradient_wk1(params, seqs, get<int>(cfg, "theory.fd_coords"), root.child("fd"));
  return {{"kind", kind},
          {"previous_token_fraction", r.previous_token_fraction},
          {"fd_max_rel_err", opt(r.fd_max_rel_err)}};
}

json run_threestep(const json& cfg, const fs::path&) {
  const CurriculumReport r = three_step_curriculum(build_curriculum(cfg));
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"matrix", s.matrix}, {"samples", s.samples}, {"recall", s.recall}, {"scores", score_json(s.scores)}});
  json summary = {{"recall_wo2", r.recall_wo2},
                  {"recall_wk2", r.recall_wk2},
                  {"recall_wk1", r.recall_wk1},
                  {"previous_token_fraction", r.previous_token_fraction},
                  {"tau_hat", r.tau_hat},
                  {"acc_icl", opt(r.eval.acc_icl)},
                  {"loss_icl", opt(r.eval.loss_icl)}};
  summary["steps"] = steps;
  return summary;
}

json run_gradcheck(const json& cfg, const fs::path&) {
  const RngStream root(get<std::uint64_t>(cfg, "seed"));
  const int d = get<int>(cfg, "gradcheck.d"), N = get<int>(cfg, "gradcheck.N"), T = get<int>(cfg, "gradcheck.T");
  const ModelParams params = init_params(d, N, T, TrainableInit::Gaussian, true, root.child("params"));
  const MarkovSpec spec = synthetic_markov(N, 1.0, root.child("markov"));
  TriggerConfig trig;
  trig.K = 1;
  const SequenceSampler sampler(spec, trig);
  const auto batch = sampler.sample_batch(T, get<int>(cfg, "gradcheck.batch_size"), root.child("data"));
  const auto coords = sample_coordinates(params, get<int>(cfg, "gradcheck.per_matrix"), root.child("coords"));
  json summary;
  for (const auto& [name, mode] : {std::pair{"all", MaskMode::All}, std::pair{"in_context_only", MaskMode::InContextOnly}}) {
    try {
      const GradcheckReport r = gradcheck(params, batch, mode, coords, get<double>(cfg, "gradcheck.tol"),
                                          get<double>(cfg, "gradcheck.eps"));
      summary[name] = {{"max_rel_err", r.max_rel_err}, {"checked", r.checked}, {"passed", r.passed()}};
    } catch (const EmptyBatchError&) {
      summary[name] = {{"max_rel_err", nullptr}, {"checked", 0}, {"passed", nullptr}};
    }
  }
  return summary;
}

json run_data_stats(const json& cfg, const fs::path& out) {
  const MarkovSpec spec = build_markov(cfg);
  write_json(out / "markov.json", markov_to_json(spec));
  return {{"N", spec.N}, {"entropy_rate", bigram_entropy_rate(spec)}};
}

json run_single(const json& cfg, const fs::path& out);

std::string value_label(const json& v) {
  if (v.is_number_integer() || v.is_number_unsigned()) return std::to_string(v.get<long long>());
  return format_number(v.get<double>());
}

std::string csv_field(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number_integer() || v.is_number_unsigned()) return std::to_string(v.get<long long>());
  if (v.is_number()) return format_number(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return "";
}

json run_sweep(const json& cfg, const fs::path& out) {
  const auto sub = get<std::string>(cfg, "sweep.experiment");
  const auto axis = get<std::string>(cfg, "sweep.axis");
  const std::string key = axis_key(sub, axis);
  // Every point shares one derived seed, so differences along the axis are
  // not confounded with sampling noise.
  const std::uint64_t sub_seed = RngStream(get<std::uint64_t>(cfg, "seed")).child("sweep").seed();
  std::vector<json> summaries;
  std::vector<std::string> columns;
  for (const auto& value : cfg["sweep"]["values"]) {
    json point = cfg;
    point["experiment"] = sub;
    point["seed"] = sub_seed;
    point["sweep"] = default_config()["sweep"];
    apply_override(point, key, value.dump());
    point["output_dir"] = (out / (axis + "_" + value_label(value))).string();
    json resolved = resolve_config(point);
    const fs::path dir = resolved["output_dir"].get<std::string>();
    json s = run_experiment(resolved, dir);
    for (const auto& [k, v] : s.items())
      if (v.is_primitive() && std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
    summaries.push_back(std::move(s));
  }
  std::string text = "axis,value";
  for (const auto& c : columns) text += "," + c;
  text += "\n";
  json rows = json::array();
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const json& value = cfg["sweep"]["values"][i];
    text += axis + "," + value_label(value);
    for (const auto& c : columns) text += "," + (summaries[i].contains(c) ? csv_field(summaries[i][c]) : "");
    text += "\n";
    rows.push_back({{"value", value}, {"summary", summaries[i]}});
  }
  write_text(out / "summary.csv", text);
  return {{"axis", axis}, {"experiment", sub}, {"points", static_cast<long>(summaries.size())}, {"rows", rows}};
}

json run_single(const json& cfg, const fs::path& out) {
  const auto experiment = get<std::string>(cfg, "experiment");
  if (experiment == "train") return run_train(cfg, out);
  if (experiment == "oracle") return run_oracle(cfg, out);
  if (experiment == "theory_onestep") return run_theory_onestep(cfg, out);
  if (experiment == "theory_threestep") return run_threestep(cfg, out);
  if (experiment == "gradcheck") return run_gradcheck(cfg, out);
  if (experiment == "data_stats") return run_data_stats(cfg, out);
  return run_sweep(cfg, out);
}

}  // namespace

json resolve_config(const json& user) {
  json cfg = default_config();
  merge_checked(cfg, user, "");
  validate_ranges(cfg);
  // The vocabulary follows the data source; an explicit geometry.N must agree.
  const auto source = get<std::string>(cfg, "markov.source");
  if (source != "corpus") {
    const int N = get<int>(cfg, "markov.N");
    require(cfg["geometry"]["N"].is_null() || cfg["geometry"]["N"].get<int>() == N, "geometry.N",
            "does not match markov.N");
    cfg["geometry"]["N"] = N;
  } else {
    const MarkovSpec spec = build_markov(cfg);
    require(cfg["geometry"]["N"].is_null() || cfg["geometry"]["N"].get<int>() == spec.N, "geometry.N",
            "does not match the corpus vocabulary");
    cfg["geometry"]["N"] = spec.N;
    cfg["markov"]["N"] = spec.N;
  }
  return cfg;
}

json run_experiment(const json& resolved, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  // The output location is not a setting: re-running from this file into any
  // directory reproduces the same bytes.
  json echoed = resolved;
  echoed.erase("output_dir");
  write_json(out_dir / "resolved_config.json", echoed);
  json summary = run_single(resolved, out_dir);
  write_json(out_dir / "report.json", {{"experiment", resolved["experiment"]}, {"summary", summary}});
  return summary;
}

}  // namespace bil
