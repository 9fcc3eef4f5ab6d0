#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stae/config.hpp"
#include "stae/data.hpp"
#include "stae/model.hpp"

namespace stae {

struct TrainConfig {
  double lr = 0.001;
  std::vector<std::size_t> decay_milestones{20, 30};  // 1-based epochs
  double decay_factor = 0.1;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 200;
  std::size_t patience = 30;
  std::uint64_t seed = 0;
  double null_value = 0.0;
  double mape_epsilon = 1.0;
  std::size_t eval_batch_size = 64;
  std::size_t threads = 1;

  void validate() const;
  // Learning rate in effect during `epoch` (1-based).
  double lr_at(std::size_t epoch) const;

  static TrainConfig from_config(const ConfigMap& map, const TrainConfig& defaults);
  static TrainConfig from_config(const ConfigMap& map);
  void write_to(ConfigMap& map, const std::string& prefix = "") const;
};

struct MaskedLoss {
  Tensor loss;              // scalar
  std::size_t count = 0;    // unmasked entries
  bool all_masked = false;  // loss is 0 and carries no gradient signal
};

// Mean |pred − target| over entries whose target differs from null_value.
MaskedLoss masked_mae_loss(const Tensor& pred, const Tensor& target, double null_value);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update from the gradients held by `params`.
// Parameters without a gradient are treated as having a zero one.
void adam_step(std::span<const Tensor> params, AdamState& state, double lr);

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent; NaN when no entry passes the MAPE guard
  std::size_t count = 0;
  std::size_t mape_count = 0;
};

struct MetricsReport {
  std::vector<Metrics> horizons;  // index h - 1 for horizon h
  Metrics average;                // pooled over every horizon

  const Metrics& at_horizon(std::size_t h) const;
};

// Metrics over de-normalised (B × T_out × N) arrays. Entries with truth equal
// to null_value are masked; MAPE additionally skips |truth| <= mape_epsilon.
MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> truth, std::size_t batch,
                              std::size_t horizon, std::size_t nodes, double null_value, double mape_epsilon);

struct EvalOptions {
  double null_value = 0.0;
  double mape_epsilon = 1.0;
  std::size_t batch_size = 64;
  std::size_t threads = 1;
  // Applied to every batch before the forward pass (shuffle probe).
  std::function<void(WindowBatch&)> transform;

  static EvalOptions from(const TrainConfig& cfg);
};

// Eval-mode forward over every window, de-normalised through the window set's
// normaliser. Worker threads only produce predictions; sums are reduced in a
// fixed order so the result does not depend on `threads`.
MetricsReport evaluate(const Model& model, const WindowSet& windows, const EvalOptions& options = {});

// Raw de-normalised predictions, (windows × T_out × N) row-major.
std::vector<double> predict(const Model& model, const WindowSet& windows, const EvalOptions& options = {});

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  double val_mape = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
  bool early_stopped = false;
};

// Trains in place and leaves `model` holding the best-validation parameters.
TrainResult train(Model& model, const WindowSet& train_windows, const WindowSet& val_windows, const TrainConfig& cfg);

std::string history_csv(const std::vector<EpochRecord>& history);

// Chronological split, train-fitted normaliser, one window set per split.
struct DataBundle {
  Normalizer normalizer;
  WindowSet train;
  WindowSet val;
  WindowSet test;
};

DataBundle prepare_data(const TrafficDataset& ds, const SplitSpec& split, std::size_t frames, std::size_t horizon);

struct RunOutcome {
  Model model;
  TrainResult result;
  MetricsReport test;
};

// build -> train -> evaluate on the test split, all seeded by cfg.seed.
RunOutcome train_and_evaluate(const DataBundle& data, const ModelConfig& model_config, const TrainConfig& cfg);

}  // namespace stae
