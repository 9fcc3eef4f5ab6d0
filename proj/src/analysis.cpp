#include "stae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "stae/error.hpp"
#include "stae/io.hpp"

namespace stae {

namespace {

std::string metric_cell(double v) { return std::isfinite(v) ? format_double(v) : "NA"; }

}  // namespace

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationRow> run_ablation(const DataBundle& data, const ModelConfig& base, const TrainConfig& cfg,
                                      const std::vector<std::string>& variants) {
  std::vector<AblationRow> rows;
  for (const auto& tag : variants) {
    AblationRow row;
    row.variant = tag;
    try {
      ModelConfig mc = base;
      mc.variant = ModelVariant::parse(tag);
      RunOutcome run = train_and_evaluate(data, mc, cfg);
      row.parameters = run.model.parameter_count();
      row.best_epoch = run.result.best_epoch;
      row.test = run.test.average;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  CsvWriter csv({"variant", "status", "parameters", "best_epoch", "mae", "rmse", "mape"});
  for (const auto& r : rows) {
    if (r.ok) {
      csv.row({r.variant, "ok", std::to_string(r.parameters), std::to_string(r.best_epoch), metric_cell(r.test.mae),
               metric_cell(r.test.rmse), metric_cell(r.test.mape)});
    } else {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      csv.row({r.variant, "error: " + msg, "NA", "NA", "NA", "NA", "NA"});
    }
  }
  return csv.text();
}

// ---------------------------------------------------------------------------
// Shuffle probe

std::vector<std::vector<std::size_t>> random_permutations(std::size_t frames, std::size_t n_perms, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t k = 0; k < n_perms; ++k) {
    std::vector<std::size_t> perm(frames);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = frames; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
    out.push_back(std::move(perm));
  }
  return out;
}

ShuffleEntry probe_model(const std::string& label, const Model& model, const WindowSet& windows,
                         const std::vector<std::vector<std::size_t>>& permutations, const EvalOptions& options,
                         ShuffleMode mode) {
  if (!model.trained()) throw ContractError("shuffle probe: model '" + label + "' has not been trained");
  ShuffleEntry entry;
  entry.label = label;
  EvalOptions intact = options;
  intact.transform = nullptr;
  entry.mae_intact = evaluate(model, windows, intact).average.mae;
  double total = 0.0;
  for (const auto& perm : permutations) {
    EvalOptions shuffled = options;
    shuffled.transform = [&perm, mode](WindowBatch& batch) {
      ShuffledInput s = temporal_shuffle(batch.x, batch.calendar, perm, mode);
      batch.x = std::move(s.x);
      batch.calendar = std::move(s.calendar);
    };
    const double mae = evaluate(model, windows, shuffled).average.mae;
    entry.mae_shuffled.push_back(mae);
    total += (mae - entry.mae_intact) / entry.mae_intact;
  }
  entry.delta = permutations.empty() ? 0.0 : total / static_cast<double>(permutations.size());
  return entry;
}

ShuffleReport shuffle_probe(const Model& adaptive_model, const Model& spatial_model, const WindowSet& windows,
                            const std::vector<std::vector<std::size_t>>& permutations, const EvalOptions& options,
                            ShuffleMode mode) {
  if (!adaptive_model.config().variant.adaptive) throw ConfigError("shuffle probe: first model must carry E_a");
  if (!spatial_model.config().variant.spatial_embedding) throw ConfigError("shuffle probe: second model must carry E_s");
  ShuffleReport report;
  report.permutations = permutations;
  report.adaptive = probe_model("Ea", adaptive_model, windows, permutations, options, mode);
  report.spatial = probe_model("Es", spatial_model, windows, permutations, options, mode);
  report.ratio = report.spatial.delta != 0.0 ? report.adaptive.delta / report.spatial.delta
                                             : std::numeric_limits<double>::quiet_NaN();
  return report;
}

std::string shuffle_csv(const ShuffleReport& report) {
  CsvWriter csv({"model", "permutation", "order", "mae"});
  for (const ShuffleEntry* e : {&report.adaptive, &report.spatial}) {
    csv.row({e->label, "intact", "", metric_cell(e->mae_intact)});
    for (std::size_t k = 0; k < e->mae_shuffled.size(); ++k) {
      std::string order;
      for (std::size_t i = 0; i < report.permutations[k].size(); ++i) {
        order += (i ? " " : "") + std::to_string(report.permutations[k][i]);
      }
      csv.row({e->label, std::to_string(k), order, metric_cell(e->mae_shuffled[k])});
    }
  }
  csv.row({"Ea", "delta", "", metric_cell(report.adaptive.delta)});
  csv.row({"Es", "delta", "", metric_cell(report.spatial.delta)});
  csv.row({"Ea/Es", "ratio", "", metric_cell(report.ratio)});
  return csv.text();
}

// ---------------------------------------------------------------------------
// Frame correlation

double FrameCorrelation::adjacent_mean() const {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(matrix.rows()); ++i) {
    if (!entry_defined(i, i + 1)) continue;
    total += matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i + 1));
    ++n;
  }
  return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

double FrameCorrelation::distant_mean(std::size_t min_gap) const {
  double total = 0.0;
  std::size_t n = 0;
  const auto t = static_cast<std::size_t>(matrix.rows());
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + min_gap; j < t; ++j) {
      if (!entry_defined(i, j)) continue;
      total += matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

FrameCorrelation frame_correlation(const Tensor& table) {
  if (table.ndim() < 2) throw ShapeError("frame_correlation: expected (T × N × d), got " + shape_str(table.shape()));
  const auto t = static_cast<Eigen::Index>(table.dim(0));
  const auto width = static_cast<Eigen::Index>(table.numel() / table.dim(0));
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMajor> frames(table.values().data(), t, width);

  const Eigen::VectorXd means = frames.rowwise().mean();
  const RowMajor centered = frames.colwise() - means;
  const Eigen::MatrixXd gram = centered * centered.transpose();

  FrameCorrelation out;
  out.matrix = Eigen::MatrixXd::Zero(t, t);
  out.defined.assign(static_cast<std::size_t>(t), false);
  for (Eigen::Index i = 0; i < t; ++i) {
    // Constant frames leave only rounding residue after centring.
    const double spread = std::sqrt(gram(i, i) / static_cast<double>(width));
    out.defined[i] = spread > 1e-12 * std::max(1.0, std::abs(means(i)));
  }
  for (Eigen::Index i = 0; i < t; ++i) {
    if (!out.defined[i]) continue;
    for (Eigen::Index j = i; j < t; ++j) {
      if (!out.defined[j]) continue;
      const double r = gram(i, j) / std::sqrt(gram(i, i) * gram(j, j));
      out.matrix(i, j) = r;
      out.matrix(j, i) = r;
    }
  }
  return out;
}

std::string correlation_csv(const FrameCorrelation& corr) {
  const auto t = static_cast<std::size_t>(corr.matrix.rows());
  std::vector<std::string> header{"frame"};
  for (std::size_t j = 0; j < t; ++j) header.push_back(std::to_string(j));
  CsvWriter csv(header);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<std::string> cells{std::to_string(i)};
    for (std::size_t j = 0; j < t; ++j) {
      cells.push_back(corr.entry_defined(i, j)
                          ? format_double(corr.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)))
                          : "NA");
    }
    csv.row(cells);
  }
  return csv.text();
}

std::string correlation_ppm(const FrameCorrelation& corr, std::size_t cell_px) {
  if (cell_px < 1) throw ConfigError("correlation_ppm: cell size must be >= 1");
  const auto t = static_cast<std::size_t>(corr.matrix.rows());
  const std::size_t side = t * cell_px;
  std::string out = "P6\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t i = y / cell_px;
      const std::size_t j = x / cell_px;
      unsigned char rgb[3] = {128, 128, 128};
      if (corr.entry_defined(i, j)) {
        const double r = std::clamp(corr.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), -1.0, 1.0);
        const auto fade = static_cast<unsigned char>(std::lround(255.0 * (1.0 - std::abs(r))));
        if (r >= 0.0) {
          rgb[0] = 255, rgb[1] = fade, rgb[2] = fade;
        } else {
          rgb[0] = fade, rgb[1] = fade, rgb[2] = 255;
        }
      }
      out.append(reinterpret_cast<const char*>(rgb), 3);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding dumps

EmbeddingTable parse_embedding_table(const std::string& name) {
  if (name == "Ea") return EmbeddingTable::Adaptive;
  if (name == "Es") return EmbeddingTable::Spatial;
  if (name == "Tw") return EmbeddingTable::DayOfWeek;
  if (name == "Td") return EmbeddingTable::TimeOfDay;
  throw ConfigError("unknown embedding table '" + name + "' (expected Ea, Es, Tw or Td)");
}

const char* to_string(EmbeddingTable which) {
  switch (which) {
    case EmbeddingTable::Adaptive: return "Ea";
    case EmbeddingTable::Spatial: return "Es";
    case EmbeddingTable::DayOfWeek: return "Tw";
    case EmbeddingTable::TimeOfDay: return "Td";
  }
  return "?";
}

const Tensor& embedding_table(const Model& model, EmbeddingTable which) {
  const std::string tag = model.config().variant.tag();
  auto missing = [&]() -> MissingTableError {
    return MissingTableError(std::string("embedding table ") + to_string(which) + " does not exist in variant '" + tag +
                             "'");
  };
  switch (which) {
    case EmbeddingTable::Adaptive:
      if (!model.adaptive()) throw missing();
      return model.adaptive()->table;
    case EmbeddingTable::Spatial:
      if (!model.spatial_embedding()) throw missing();
      return model.spatial_embedding()->table;
    case EmbeddingTable::DayOfWeek:
      if (!model.periodicity()) throw missing();
      return model.periodicity()->day_of_week;
    case EmbeddingTable::TimeOfDay:
      if (!model.periodicity()) throw missing();
      return model.periodicity()->time_of_day;
  }
  throw missing();
}

void dump_embedding(const Model& model, EmbeddingTable which, const std::filesystem::path& path) {
  save_stts_tensor(to_string(which), embedding_table(model, which), path);
}

}  // namespace stae

namespace stae {

// ---------------------------------------------------------------------------
// Gradient check

ModelConfig tiny_preset() {
  ModelConfig c;
  c.frames = 4;
  c.horizon = 4;
  c.nodes = 3;
  c.d_f = 4;
  c.d_a = 4;
  c.heads = 2;
  c.layers = 1;
  c.d_ff = 8;
  c.dropout = 0.0;
  return c;
}

GradCheckReport check_model_gradients(const ModelConfig& config, std::size_t batch, std::uint64_t seed, double h,
                                      double tol) {
  if (batch < 1) throw ConfigError("grad-check: batch must be >= 1");
  Model model(config, seed);
  Rng rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t cells = batch * config.frames * config.nodes;
  std::vector<double> x(cells);
  for (double& v : x) v = normal(rng);
  std::vector<double> y(batch * config.horizon * config.nodes);
  for (double& v : y) v = normal(rng);

  CalendarIndices cal{batch, config.frames, {}, {}};
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t start = rng() % (kDaysPerWeek * kStepsPerDay);
    for (std::size_t t = 0; t < config.frames; ++t) {
      const std::size_t step = start + t;
      cal.dow.push_back(static_cast<std::int32_t>((step / kStepsPerDay) % kDaysPerWeek));
      cal.tod.push_back(static_cast<std::int32_t>(step % kStepsPerDay));
    }
  }
  const Tensor input({batch, config.frames, config.nodes, 1}, std::move(x));
  const Tensor target({batch, config.horizon, config.nodes, 1}, std::move(y));
  auto loss = [&] {
    const Tensor diff = sub(model.forward(input, cal, false), target);
    return mean(mul(diff, diff));
  };
  return grad_check(loss, model.parameters(), h, tol);
}

std::string grad_check_csv(const GradCheckReport& report) {
  CsvWriter csv({"parameter", "size", "max_rel_error", "worst_index", "analytic", "numeric", "status"});
  for (const auto& e : report.entries) {
    csv.row({e.name, std::to_string(e.size), format_double(e.max_rel_error), std::to_string(e.worst_index),
             format_double(e.analytic), format_double(e.numeric), e.flagged ? "FAIL" : "ok"});
  }
  return csv.text();
}

}  // namespace stae
