#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bil/datagen.hpp"
#include "bil/errors.hpp"
#include "bil/grad.hpp"
#include "bil/model.hpp"
#include "bil/probes.hpp"

namespace bil {

struct Geometry {
  int d = 128;
  int N = 65;
  int T = 128;
  bool use_ff = true;
  double attn_scale = 1.0;
  TrainableInit init = TrainableInit::Gaussian;
};

struct TrainConfig {
  double eta = 0.2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  int iters = 2000;
  MaskMode mask = MaskMode::All;
  /// Matrix name -> first iteration at which it is updated. Absent names are
  /// trained from iteration 0; a value >= iters keeps the matrix frozen.
  std::map<std::string, int> freeze;
  int probe_every = 1;
  std::uint64_t seed = 0;
  double kl_eps = 1e-6;
  Wk2Support wk2_support = Wk2Support::TriggerSupport;

  void validate(const ModelParams& params) const;
  [[nodiscard]] bool updates(const std::string& name, int iter) const;
};

struct MetricsRow {
  int iter = 0;
  std::optional<double> loss_all, loss_global, loss_icl, acc_icl;
  std::optional<double> recall_wk1_full, recall_wk1_early, recall_wk2, recall_wo2, kl_wf;
  double wall_seconds = 0.0;
};

/// Momentum buffers, one per trainable matrix, created on first use.
struct OptimizerState {
  std::map<std::string, Matrix> velocity;
};

/// v <- momentum v + (g + weight_decay w); w <- w - eta v, for every
/// trainable matrix that the freeze schedule allows at `iter`. Frozen
/// matrices keep both weights and velocity. Throws NumericalError when a
/// gradient is not finite.
void sgd_step(ModelParams& params, const Grads& grads, OptimizerState& state, const TrainConfig& cfg, int iter);

struct TrainResult {
  std::vector<MetricsRow> log;
  ModelParams params;
};

using RowCallback = std::function<void(const MetricsRow&)>;

/// Probe columns of a row from the current weights.
void fill_probes(MetricsRow& row, const ModelParams& params, const TargetMemories& mem, const MarkovSpec& spec,
                 double kl_eps);

/// Fresh-batch training. Iteration i draws batch i from the "data" substream
/// of cfg.seed, records metrics and probes on it, then takes one step. A
/// final evaluation-only row is recorded at iteration cfg.iters. Parameters
/// come from `initial` when given, otherwise from the "params" substream.
TrainResult train_loop(const MarkovSpec& spec, const TriggerConfig& trig, const Geometry& geometry,
                       const TrainConfig& cfg, const std::optional<ModelParams>& initial = std::nullopt,
                       const RowCallback& on_row = {});

inline constexpr const char* kMetricsHeader =
    "iter,loss_all,loss_global,loss_icl,acc_icl,recall_wk1_full,recall_wk1_early,recall_wk2,recall_wo2,kl_wf,"
    "wall_seconds";

/// One CSV line without the trailing newline; missing values are empty.
std::string format_metrics_row(const MetricsRow& row);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

}  // namespace bil
