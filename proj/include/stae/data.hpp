#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stae/embedding.hpp"
#include "stae/tensor.hpp"

namespace stae {

// (steps × nodes × 1) traffic values plus per-step calendar indices.
struct TrafficDataset {
  std::string name = "dataset";
  std::size_t steps = 0;
  std::size_t nodes = 0;
  int interval_minutes = 5;
  std::vector<double> values;  // row-major (step, node)
  std::vector<std::uint8_t> dow;
  std::vector<std::uint16_t> tod;

  double value(std::size_t step, std::size_t node) const { return values[step * nodes + node]; }
  // Throws ManifestError when sizes or calendar indices are inconsistent.
  void validate() const;

  bool operator==(const TrafficDataset&) const = default;
};

// dow = (step / 288) mod 7, tod = step mod 288, counting from `first_step`.
void fill_calendar(TrafficDataset& ds, std::size_t first_step = 0);

struct GeneratorConfig {
  std::size_t nodes = 8;
  std::size_t steps = 2016;
  std::size_t clusters = 3;
  double noise_std = 1.0;
  std::uint64_t seed = 0;
  // Relative weekend dip; zero makes the series exactly day-periodic.
  double weekly_amplitude = 0.15;
  double ar_coefficient = 0.8;
  std::string name = "synthetic";
};

// Node n belongs to cluster n % clusters.
std::size_t cluster_of(std::size_t node, std::size_t clusters);

// Each cluster c draws a base level and a distinct phase offset for a two-peak
// diurnal profile; nodes add AR(1) and white noise. Values are clamped at 0.
TrafficDataset generate_synthetic(const GeneratorConfig& config);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  // "6:2:2", "7:1:2", "0.7,0.1,0.2" ...
  static SplitSpec parse(const std::string& text);
  void validate() const;
};

struct Splits {
  TrafficDataset train;
  TrafficDataset val;
  TrafficDataset test;
  std::size_t val_begin = 0;
  std::size_t test_begin = 0;
};

// Contiguous partition at floor(steps·r1) and floor(steps·(r1 + r2)).
Splits chrono_split(const TrafficDataset& ds, const SplitSpec& spec);

// Single global z-score, fitted on the train split only.
struct Normalizer {
  double mean = 0.0;
  double std = 1.0;

  static Normalizer fit(const TrafficDataset& train);
  double apply(double v) const { return (v - mean) / std; }
  double invert(double v) const { return v * std + mean; }
};

struct WindowBatch {
  Tensor x;                  // (B × T × N × 1), normalised when the set carries a normaliser
  CalendarIndices calendar;  // (B × T)
  Tensor y;                  // (B × T_out × N × 1), raw units
  std::vector<std::size_t> starts;

  std::size_t size() const { return starts.size(); }
};

// Stride-1 sliding windows over one dataset (one split). Window i reads input
// steps [i, i + T) and targets [i + T, i + T + T_out).
class WindowSet {
 public:
  WindowSet(std::shared_ptr<const TrafficDataset> data, std::size_t frames, std::size_t horizon,
            std::optional<Normalizer> normalizer = std::nullopt);

  std::size_t size() const { return count_; }
  std::size_t frames() const { return frames_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t nodes() const { return data_->nodes; }
  const TrafficDataset& dataset() const { return *data_; }
  const std::optional<Normalizer>& normalizer() const { return normalizer_; }

  // Last dataset step touched by window i.
  std::size_t last_step(std::size_t i) const { return i + frames_ + horizon_ - 1; }

  WindowBatch batch(std::span<const std::size_t> sample_indices) const;
  WindowBatch sample(std::size_t i) const;

 private:
  std::shared_ptr<const TrafficDataset> data_;
  std::size_t frames_;
  std::size_t horizon_;
  std::size_t count_;
  std::optional<Normalizer> normalizer_;
};

WindowSet make_windows(TrafficDataset ds, std::size_t frames, std::size_t horizon,
                       std::optional<Normalizer> normalizer = std::nullopt);

enum class ShuffleMode { ValuesOnly, ValuesAndCalendar };

struct ShuffledInput {
  Tensor x;
  CalendarIndices calendar;
};

// Output frame t takes input frame perm[t]. ValuesOnly leaves the calendar
// untouched.
ShuffledInput temporal_shuffle(const Tensor& x, const CalendarIndices& calendar,
                               std::span<const std::size_t> perm, ShuffleMode mode = ShuffleMode::ValuesOnly);

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

// STTS v1 container: "STTS", u8 version, u32 header length, JSON header,
// f64 values, u8 dow, u16 tod (all little-endian).
inline constexpr std::uint8_t kSttsVersion = 1;

void save_stts(const TrafficDataset& ds, const std::filesystem::path& path);
TrafficDataset load_stts(const std::filesystem::path& path);
TrafficDataset parse_stts(std::string_view bytes);
std::string encode_stts(const TrafficDataset& ds);

// Same container holding an arbitrary tensor: header carries "shape" and
// "calendar": false, and no index arrays follow the values.
void save_stts_tensor(const std::string& name, const Tensor& tensor, const std::filesystem::path& path);
Tensor load_stts_tensor(const std::filesystem::path& path);

}  // namespace stae
