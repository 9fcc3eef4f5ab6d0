#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stae/data.hpp"
#include "stae/model.hpp"
#include "stae/training.hpp"

namespace stae {

// --- ablation battery -------------------------------------------------------

struct AblationRow {
  std::string variant;
  bool ok = false;
  std::string error;  // what() of the failure when !ok
  std::size_t parameters = 0;
  std::size_t best_epoch = 0;
  Metrics test;
};

// Trains every variant with the same seed, splits and schedule. A variant
// that throws is recorded and the battery moves on.
std::vector<AblationRow> run_ablation(const DataBundle& data, const ModelConfig& base, const TrainConfig& cfg,
                                      const std::vector<std::string>& variants);

std::string ablation_csv(const std::vector<AblationRow>& rows);

// --- temporal shuffle probe -------------------------------------------------

struct ShuffleEntry {
  std::string label;
  double mae_intact = 0.0;
  std::vector<double> mae_shuffled;  // one per permutation
  double delta = 0.0;                // mean relative degradation
};

struct ShuffleReport {
  std::vector<std::vector<std::size_t>> permutations;
  ShuffleEntry adaptive;  // model with E_a
  ShuffleEntry spatial;   // model with E_s
  double ratio = 0.0;     // delta(adaptive) / delta(spatial); NaN when the latter is 0
};

// n_perms random frame permutations drawn from `seed`.
std::vector<std::vector<std::size_t>> random_permutations(std::size_t frames, std::size_t n_perms, std::uint64_t seed);

// Test MAE of one trained model on intact and frame-permuted inputs.
ShuffleEntry probe_model(const std::string& label, const Model& model, const WindowSet& windows,
                         const std::vector<std::vector<std::size_t>>& permutations, const EvalOptions& options,
                         ShuffleMode mode = ShuffleMode::ValuesOnly);

ShuffleReport shuffle_probe(const Model& adaptive_model, const Model& spatial_model, const WindowSet& windows,
                            const std::vector<std::vector<std::size_t>>& permutations, const EvalOptions& options,
                            ShuffleMode mode = ShuffleMode::ValuesOnly);

std::string shuffle_csv(const ShuffleReport& report);

// --- frame correlation ------------------------------------------------------

struct FrameCorrelation {
  Eigen::MatrixXd matrix;     // T × T; rows/cols of undefined frames hold 0
  std::vector<bool> defined;  // false for zero-variance frames

  bool entry_defined(std::size_t i, std::size_t j) const { return defined[i] && defined[j]; }
  // Mean over defined pairs (i, j), i < j, with |i - j| == 1.
  double adjacent_mean() const;
  // Mean over defined pairs with |i - j| >= min_gap.
  double distant_mean(std::size_t min_gap) const;
};

// Pearson correlation between frames of a (T × N × d) table, each frame
// flattened over N·d.
FrameCorrelation frame_correlation(const Tensor& table);

std::string correlation_csv(const FrameCorrelation& corr);
// Binary PPM heatmap, blue (-1) through white (0) to red (+1); grey marks
// undefined entries. Each matrix cell becomes a cell_px square.
std::string correlation_ppm(const FrameCorrelation& corr, std::size_t cell_px = 16);

// --- embedding dumps --------------------------------------------------------

enum class EmbeddingTable { Adaptive, Spatial, DayOfWeek, TimeOfDay };

// "Ea", "Es", "Tw", "Td"
EmbeddingTable parse_embedding_table(const std::string& name);
const char* to_string(EmbeddingTable which);

// Throws MissingTableError when this variant lacks the table.
const Tensor& embedding_table(const Model& model, EmbeddingTable which);
void dump_embedding(const Model& model, EmbeddingTable which, const std::filesystem::path& path);

// --- gradient check ---------------------------------------------------------

// Full model, d_f = d_a = 4, N = 3, T = T_out = 4, one layer per stack, 2 heads.
ModelConfig tiny_preset();

// Finite-difference check of every parameter tensor of a freshly initialised
// model. Uses a squared-error loss on random inputs in eval mode, so the
// objective is smooth and deterministic.
GradCheckReport check_model_gradients(const ModelConfig& config, std::size_t batch, std::uint64_t seed,
                                      double h = 1e-5, double tol = 1e-4);

std::string grad_check_csv(const GradCheckReport& report);

}  // namespace stae
