#include "bil/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace bil {

void TrainConfig::validate(const ModelParams& params) const {
  if (!(eta > 0.0)) throw std::invalid_argument("train.eta must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be nonnegative");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be positive");
  if (iters < 0) throw std::invalid_argument("train.iters must be nonnegative");
  if (probe_every < 1) throw std::invalid_argument("train.probe_every must be positive");
  const auto names = params.trainable_names();
  for (const auto& [name, start] : freeze) {
    if (std::find(names.begin(), names.end(), name) == names.end())
      throw std::invalid_argument("train.freeze: unknown trainable matrix " + name);
    if (start < 0) throw std::invalid_argument("train.freeze: negative iteration for " + name);
  }
}

bool TrainConfig::updates(const std::string& name, int iter) const {
  const auto it = freeze.find(name);
  return it == freeze.end() || iter >= it->second;
}

void sgd_step(ModelParams& params, const Grads& grads, OptimizerState& state, const TrainConfig& cfg, int iter) {
  for (const auto& name : params.trainable_names()) {
    if (!cfg.updates(name, iter)) continue;
    const Matrix& g = grads[name];
    Matrix& w = params.trainable(name);
    if (g.rows() != w.rows() || g.cols() != w.cols())
      throw std::invalid_argument("sgd_step: gradient shape mismatch for " + name);
    if (!g.allFinite())
      throw NumericalError("sgd_step: non-finite gradient for " + name + " at iteration " + std::to_string(iter));
    auto [slot, fresh] = state.velocity.try_emplace(name, Matrix::Zero(w.rows(), w.cols()));
    Matrix& v = slot->second;
    v = cfg.momentum * v + g + cfg.weight_decay * w;
    w -= cfg.eta * v;
  }
}

void fill_probes(MetricsRow& row, const ModelParams& params, const TargetMemories& mem, const MarkovSpec& spec,
                 double kl_eps) {
  row.recall_wk1_full = recall(params.W_K1, mem.wk1_full);
  row.recall_wk1_early = recall(params.W_K1, mem.wk1_early);
  row.recall_wk2 = recall(params.W_K2, mem.wk2);
  row.recall_wo2 = recall(params.W_O2, mem.wo2);
  if (params.use_ff) row.kl_wf = kl_probe(params.W_F, params, spec, kl_eps);
}

namespace {

void copy_losses(MetricsRow& row, const LossMetrics& m) {
  row.loss_all = m.loss_all;
  row.loss_global = m.loss_global;
  row.loss_icl = m.loss_icl;
  row.acc_icl = m.acc_icl;
}

}  // namespace

TrainResult train_loop(const MarkovSpec& spec, const TriggerConfig& trig, const Geometry& g, const TrainConfig& cfg,
                       const std::optional<ModelParams>& initial, const RowCallback& on_row) {
  const RngStream root(cfg.seed);
  TrainResult result;
  result.params = initial ? *initial
                          : init_params(g.d, spec.N, g.T, g.init, g.use_ff, root.child("params"), g.attn_scale);
  ModelParams& params = result.params;
  if (params.N != spec.N) throw std::invalid_argument("train_loop: vocabulary size does not match the data");
  cfg.validate(params);

  const SequenceSampler sampler(spec, trig);
  const TargetMemories mem = target_memory_specs(params, trig, spec, std::nullopt, cfg.wk2_support);
  const RngStream data = root.child("data");
  OptimizerState state;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  auto record = [&](MetricsRow row, bool probe) {
    if (probe) fill_probes(row, params, mem, spec, cfg.kl_eps);
    row.wall_seconds = elapsed();
    if (on_row) on_row(row);
    result.log.push_back(std::move(row));
  };

  for (int it = 0; it < cfg.iters; ++it) {
    const auto batch = sampler.sample_batch(params.T, cfg.batch_size, data.child(static_cast<std::uint64_t>(it)));
    const BackwardResult br = backward(params, batch, cfg.mask);
    if (!std::isfinite(br.loss)) throw NumericalError("train_loop: non-finite loss at iteration " + std::to_string(it));
    MetricsRow row;
    row.iter = it;
    copy_losses(row, br.metrics.finalize());
    record(std::move(row), it % cfg.probe_every == 0);
    sgd_step(params, br.grads, state, cfg, it);
  }

  const auto batch =
      sampler.sample_batch(params.T, cfg.batch_size, data.child(static_cast<std::uint64_t>(cfg.iters)));
  MetricsRow last;
  last.iter = cfg.iters;
  copy_losses(last, evaluate_batch(params, batch));
  record(std::move(last), true);
  return result;
}

std::string format_metrics_row(const MetricsRow& row) {
  std::string line = std::to_string(row.iter);
  auto field = [&](const std::optional<double>& v) {
    line += ',';
    if (!v) return;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", *v);
    line += buf;
  };
  field(row.loss_all);
  field(row.loss_global);
  field(row.loss_icl);
  field(row.acc_icl);
  field(row.recall_wk1_full);
  field(row.recall_wk1_early);
  field(row.recall_wk2);
  field(row.recall_wo2);
  field(row.kl_wf);
  char buf[64];
  std::snprintf(buf, sizeof buf, ",%.3f", row.wall_seconds);
  line += buf;
  return line;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
  if (!out) throw std::runtime_error("write_metrics_csv: write failed for " + path);
}

}  // namespace bil
