#include "stae/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "stae/error.hpp"
#include "stae/io.hpp"

namespace stae {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be a finite number >= 0");
  if (!(decay_factor > 0.0)) fail("decay_factor must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (eval_batch_size < 1) fail("eval_batch_size must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (!(mape_epsilon >= 0.0)) fail("mape_epsilon must be >= 0");
  if (threads < 1) fail("threads must be >= 1");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double rate = lr;
  for (std::size_t m : decay_milestones) {
    if (m <= epoch) rate *= decay_factor;
  }
  return rate;
}

TrainConfig TrainConfig::from_config(const ConfigMap& map, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  c.lr = map.get_double("lr", c.lr);
  if (map.contains("decay_milestones")) {
    c.decay_milestones.clear();
    for (double m : map.get_list("decay_milestones", {})) {
      if (m < 1 || m != std::floor(m)) throw ConfigError("config: decay_milestones must hold positive integers");
      c.decay_milestones.push_back(static_cast<std::size_t>(m));
    }
  }
  c.decay_factor = map.get_double("decay_factor", c.decay_factor);
  c.batch_size = map.get_size("batch_size", c.batch_size);
  c.max_epochs = map.get_size("max_epochs", c.max_epochs);
  c.patience = map.get_size("patience", c.patience);
  c.seed = map.get_u64("seed", c.seed);
  c.null_value = map.get_double("null_value", c.null_value);
  c.mape_epsilon = map.get_double("mape_epsilon", c.mape_epsilon);
  c.eval_batch_size = map.get_size("eval_batch_size", c.eval_batch_size);
  c.threads = map.get_size("threads", c.threads);
  return c;
}

TrainConfig TrainConfig::from_config(const ConfigMap& map) { return from_config(map, TrainConfig{}); }

void TrainConfig::write_to(ConfigMap& map, const std::string& prefix) const {
  std::string milestones = "[";
  for (std::size_t i = 0; i < decay_milestones.size(); ++i) {
    milestones += (i ? ", " : "") + std::to_string(decay_milestones[i]);
  }
  map.set(prefix + "lr", format_double(lr));
  map.set(prefix + "decay_milestones", milestones + "]");
  map.set(prefix + "decay_factor", format_double(decay_factor));
  map.set(prefix + "batch_size", std::to_string(batch_size));
  map.set(prefix + "max_epochs", std::to_string(max_epochs));
  map.set(prefix + "patience", std::to_string(patience));
  map.set(prefix + "seed", std::to_string(seed));
  map.set(prefix + "null_value", format_double(null_value));
  map.set(prefix + "mape_epsilon", format_double(mape_epsilon));
  map.set(prefix + "eval_batch_size", std::to_string(eval_batch_size));
  map.set(prefix + "threads", std::to_string(threads));
}

// ---------------------------------------------------------------------------
// Loss and optimiser

MaskedLoss masked_mae_loss(const Tensor& pred, const Tensor& target, double null_value) {
  if (pred.shape() != target.shape()) {
    throw ContractError("masked_mae_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
  }
  const auto p = pred.values();
  const auto t = target.values();
  std::vector<double> sign(p.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (t[i] == null_value) continue;
    const double e = p[i] - t[i];
    total += std::abs(e);
    sign[i] = e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
    ++count;
  }
  MaskedLoss out;
  out.count = count;
  out.all_masked = count == 0;
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  out.loss = make_op({}, {total * inv}, {pred}, "masked_mae",
                     [sign = std::move(sign), inv](detail::Node& self) {
                       auto g = self.inputs[0]->grad_buffer();
                       const double s = self.grad[0] * inv;
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[i] * s;
                     });
  return out;
}

void adam_step(std::span<const Tensor> params, AdamState& state, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state was built for a different parameter list");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw ContractError("adam_step: moment size mismatch");
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (g[i] == 0.0 && m[i] == 0.0 && v[i] == 0.0) continue;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

const Metrics& MetricsReport::at_horizon(std::size_t h) const {
  if (h < 1 || h > horizons.size()) {
    throw ConfigError("horizon " + std::to_string(h) + " outside 1.." + std::to_string(horizons.size()));
  }
  return horizons[h - 1];
}

namespace {

struct MetricSums {
  double abs = 0.0;
  double sq = 0.0;
  double pct = 0.0;
  std::size_t count = 0;
  std::size_t mape_count = 0;

  void add(double p, double y, double null_value, double mape_epsilon) {
    if (y == null_value) return;
    const double e = p - y;
    abs += std::abs(e);
    sq += e * e;
    ++count;
    if (std::abs(y) > mape_epsilon) {
      pct += std::abs(e) / std::abs(y);
      ++mape_count;
    }
  }

  Metrics finish() const {
    Metrics m;
    m.count = count;
    m.mape_count = mape_count;
    if (count == 0) {
      m.mae = m.rmse = m.mape = std::numeric_limits<double>::quiet_NaN();
      return m;
    }
    m.mae = abs / static_cast<double>(count);
    m.rmse = std::sqrt(sq / static_cast<double>(count));
    m.mape = mape_count ? 100.0 * pct / static_cast<double>(mape_count) : std::numeric_limits<double>::quiet_NaN();
    return m;
  }
};

}  // namespace

MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> truth, std::size_t batch,
                              std::size_t horizon, std::size_t nodes, double null_value, double mape_epsilon) {
  const std::size_t n = batch * horizon * nodes;
  if (pred.size() != n || truth.size() != n) {
    throw ContractError("compute_metrics: expected " + std::to_string(n) + " entries, got " +
                        std::to_string(pred.size()) + " and " + std::to_string(truth.size()));
  }
  std::vector<MetricSums> per(horizon);
  MetricSums all;
  std::size_t i = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < horizon; ++t) {
      for (std::size_t v = 0; v < nodes; ++v, ++i) {
        per[t].add(pred[i], truth[i], null_value, mape_epsilon);
        all.add(pred[i], truth[i], null_value, mape_epsilon);
      }
    }
  }
  if (all.count == 0) throw EmptyReportError("metrics: every entry is masked, nothing to report");
  MetricsReport report;
  for (const auto& s : per) report.horizons.push_back(s.finish());
  report.average = all.finish();
  return report;
}

EvalOptions EvalOptions::from(const TrainConfig& cfg) {
  EvalOptions o;
  o.null_value = cfg.null_value;
  o.mape_epsilon = cfg.mape_epsilon;
  o.batch_size = cfg.eval_batch_size;
  o.threads = cfg.threads;
  return o;
}

namespace {

std::vector<double> predict_range(const Model& model, const WindowSet& windows, const EvalOptions& options,
                                  std::size_t first, std::size_t last) {
  NoGradGuard no_grad;
  std::vector<double> out;
  const double norm_std = windows.normalizer() ? windows.normalizer()->std : 1.0;
  const double norm_mean = windows.normalizer() ? windows.normalizer()->mean : 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = first; begin < last; begin += options.batch_size) {
    const std::size_t end = std::min(last, begin + options.batch_size);
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    WindowBatch batch = windows.batch(idx);
    if (options.transform) options.transform(batch);
    const Tensor pred = model.forward(batch.x, batch.calendar, false);
    for (double v : pred.values()) out.push_back(v * norm_std + norm_mean);
  }
  return out;
}

}  // namespace

std::vector<double> predict(const Model& model, const WindowSet& windows, const EvalOptions& options) {
  if (options.batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  const std::size_t n = windows.size();
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.threads, n));
  if (workers == 1) return predict_range(model, windows, options, 0, n);

  // Contiguous runs of whole batches, concatenated in order. Batch boundaries
  // match the single-threaded pass so every forward sees the same rows.
  std::vector<std::vector<double>> parts(workers);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  const std::size_t batches = (n + options.batch_size - 1) / options.batch_size;
  const std::size_t chunk = (batches + workers - 1) / workers * options.batch_size;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        const std::size_t first = std::min(n, w * chunk);
        parts[w] = predict_range(model, windows, options, first, std::min(n, first + chunk));
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<double> out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

MetricsReport evaluate(const Model& model, const WindowSet& windows, const EvalOptions& options) {
  if (windows.size() == 0) throw EmptyReportError("evaluate: window set is empty");
  const std::vector<double> pred = predict(model, windows, options);
  const std::size_t per_window = windows.horizon() * windows.nodes();
  std::vector<double> truth(pred.size());
  const TrafficDataset& ds = windows.dataset();
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const std::size_t first = i + windows.frames();
    std::copy_n(ds.values.begin() + static_cast<std::ptrdiff_t>(first * ds.nodes), per_window,
                truth.begin() + static_cast<std::ptrdiff_t>(i * per_window));
  }
  return compute_metrics(pred, truth, windows.size(), windows.horizon(), windows.nodes(), options.null_value,
                         options.mape_epsilon);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.values().begin(), p.values().end());
  return out;
}

void restore(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& saved) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    std::copy(saved[k].begin(), saved[k].end(), p.mutable_values().begin());
  }
}

}  // namespace

TrainResult train(Model& model, const WindowSet& train_windows, const WindowSet& val_windows, const TrainConfig& cfg) {
  cfg.validate();
  if (train_windows.size() == 0) throw ConfigError("train: training split yields no windows");
  if (val_windows.size() == 0) throw ConfigError("train: validation split yields no windows");

  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);

  const double norm_std = train_windows.normalizer() ? train_windows.normalizer()->std : 1.0;
  const double norm_mean = train_windows.normalizer() ? train_windows.normalizer()->mean : 0.0;
  const EvalOptions eval_options = EvalOptions::from(cfg);

  Rng order_rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFull);
  model.reseed_dropout(cfg.seed);
  AdamState adam;
  TrainResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();
  auto best = snapshot(params);
  std::size_t stale = 0;

  std::vector<std::size_t> order(train_windows.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    // Fisher-Yates with raw engine output so the order is library-independent.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng() % i]);

    double loss_sum = 0.0;
    std::size_t loss_weight = 0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const WindowBatch batch = train_windows.batch(std::span(order).subspan(begin, end - begin));
      for (auto& p : params) p.zero_grad();
      const Tensor pred = model.forward(batch.x, batch.calendar, true);
      const MaskedLoss loss = masked_mae_loss(add_scalar(scale(pred, norm_std), norm_mean), batch.y, cfg.null_value);
      const double value = loss.loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      }
      if (loss.all_masked) continue;
      backward(loss.loss);
      adam_step(params, adam, lr);
      loss_sum += value * static_cast<double>(batch.size());
      loss_weight += batch.size();
    }

    const MetricsReport val = evaluate(model, val_windows, eval_options);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_weight ? loss_sum / static_cast<double>(loss_weight) : 0.0;
    rec.val_mae = val.average.mae;
    rec.val_rmse = val.average.rmse;
    rec.val_mape = val.average.mape;
    rec.lr = lr;
    result.history.push_back(rec);

    if (!std::isfinite(rec.val_mae)) {
      throw NumericError("train: non-finite validation MAE at epoch " + std::to_string(epoch));
    }
    if (rec.val_mae < result.best_val_mae) {
      result.best_val_mae = rec.val_mae;
      result.best_epoch = epoch;
      best = snapshot(params);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  restore(params, best);
  for (auto& p : params) p.zero_grad();
  model.set_trained(true);
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  CsvWriter csv({"epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "lr"});
  for (const auto& r : history) {
    csv.row({std::to_string(r.epoch), format_double(r.train_loss), format_double(r.val_mae), format_double(r.val_rmse),
             format_double(r.val_mape), format_double(r.lr)});
  }
  return csv.text();
}

// ---------------------------------------------------------------------------
// Pipeline

DataBundle prepare_data(const TrafficDataset& ds, const SplitSpec& split, std::size_t frames, std::size_t horizon) {
  Splits parts = chrono_split(ds, split);
  const Normalizer norm = Normalizer::fit(parts.train);
  auto train_set = std::make_shared<const TrafficDataset>(std::move(parts.train));
  auto val_set = std::make_shared<const TrafficDataset>(std::move(parts.val));
  auto test_set = std::make_shared<const TrafficDataset>(std::move(parts.test));
  return DataBundle{norm, WindowSet(train_set, frames, horizon, norm), WindowSet(val_set, frames, horizon, norm),
                    WindowSet(test_set, frames, horizon, norm)};
}

RunOutcome train_and_evaluate(const DataBundle& data, const ModelConfig& model_config, const TrainConfig& cfg) {
  ModelConfig mc = model_config;
  mc.nodes = data.train.nodes();
  if (mc.frames != data.train.frames() || mc.horizon != data.train.horizon()) {
    throw ConfigError("pipeline: model expects T=" + std::to_string(mc.frames) + ", T_out=" +
                      std::to_string(mc.horizon) + " but windows were cut differently");
  }
  Model model(mc, cfg.seed);
  TrainResult result = train(model, data.train, data.val, cfg);
  MetricsReport test = evaluate(model, data.test, EvalOptions::from(cfg));
  return RunOutcome{std::move(model), std::move(result), std::move(test)};
}

}  // namespace stae
