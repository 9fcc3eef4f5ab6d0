#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "stae/tensor.hpp"

namespace stae {

inline constexpr std::size_t kDaysPerWeek = 7;
inline constexpr std::size_t kStepsPerDay = 288;

// Day-of-week and timestamp-of-day indices for a (batch × frames) window grid,
// row-major.
struct CalendarIndices {
  std::size_t batch = 0;
  std::size_t frames = 0;
  std::vector<std::int32_t> dow;
  std::vector<std::int32_t> tod;
};

// Raw scalar traffic value -> d_f channels.
struct FeatureProjection {
  Tensor weight;  // (1 × d_f)
  Tensor bias;    // (d_f)

  static FeatureProjection init(std::size_t d_f, Rng& rng);
};

struct PeriodicityTables {
  Tensor day_of_week;  // (7 × d_f)
  Tensor time_of_day;  // (288 × d_f)

  static PeriodicityTables init(std::size_t d_f, Rng& rng);
};

// One learnable (T × N × d_a) array shared by every window and batch element.
struct AdaptiveEmbedding {
  Tensor table;

  static AdaptiveEmbedding init(std::size_t frames, std::size_t nodes, std::size_t d_a, Rng& rng);
};

// Node-only (N × d_s) table, broadcast over frames.
struct SpatialEmbedding {
  Tensor table;

  static SpatialEmbedding init(std::size_t nodes, std::size_t d_s, Rng& rng);
};

// (B × T × N × 1) -> (B × T × N × d_f)
Tensor feature_embed(const FeatureProjection& proj, const Tensor& x);

// (B × T × N × 2·d_f), day-of-week channels first, identical across nodes.
Tensor periodicity_embed(const PeriodicityTables& tables, const CalendarIndices& calendar, std::size_t nodes);

// (B × T × N × d_a)
Tensor adaptive_embed(const AdaptiveEmbedding& emb, std::size_t batch);

// (B × T × N × d_s)
Tensor spatial_embed(const SpatialEmbedding& emb, std::size_t batch, std::size_t frames);

// Z = E_f ‖ E_p ‖ E_a along channels. Undefined tensors are skipped, which is
// how the ablation variants drop a component.
Tensor assemble_hidden(const Tensor& e_f, const Tensor& e_p, const Tensor& e_a);

}  // namespace stae
