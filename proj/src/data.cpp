#include "stae/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "stae/error.hpp"
#include "stae/io.hpp"

namespace stae {

void TrafficDataset::validate() const {
  if (values.size() != steps * nodes) {
    throw ManifestError("dataset '" + name + "': " + std::to_string(values.size()) + " values for " +
                        std::to_string(steps) + " steps x " + std::to_string(nodes) + " nodes");
  }
  if (dow.size() != steps || tod.size() != steps) {
    throw ManifestError("dataset '" + name + "': calendar length does not match step count");
  }
  for (std::size_t t = 0; t < steps; ++t) {
    if (dow[t] >= kDaysPerWeek || tod[t] >= kStepsPerDay) {
      throw ManifestError("dataset '" + name + "': calendar index out of range at step " + std::to_string(t));
    }
    if (t > 0 && tod[t] != (tod[t - 1] + 1) % kStepsPerDay) {
      throw ManifestError("dataset '" + name + "': timestamp-of-day does not advance by one at step " +
                          std::to_string(t));
    }
  }
}

void fill_calendar(TrafficDataset& ds, std::size_t first_step) {
  ds.dow.resize(ds.steps);
  ds.tod.resize(ds.steps);
  for (std::size_t t = 0; t < ds.steps; ++t) {
    const std::size_t s = first_step + t;
    ds.dow[t] = static_cast<std::uint8_t>((s / kStepsPerDay) % kDaysPerWeek);
    ds.tod[t] = static_cast<std::uint16_t>(s % kStepsPerDay);
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

std::size_t cluster_of(std::size_t node, std::size_t clusters) { return node % clusters; }

namespace {

// Gaussian bump on the 288-step day circle.
double day_bump(double tod, double center, double width) {
  const double day = static_cast<double>(kStepsPerDay);
  double d = std::fmod(tod - center, day);
  if (d < -day / 2) d += day;
  if (d > day / 2) d -= day;
  return std::exp(-0.5 * d * d / (width * width));
}

// Morning and evening rush over a base flow.
double diurnal_profile(double tod) { return 0.25 + 0.9 * day_bump(tod, 96.0, 15.0) + 0.7 * day_bump(tod, 210.0, 20.0); }

}  // namespace

TrafficDataset generate_synthetic(const GeneratorConfig& config) {
  if (config.clusters < 1 || config.nodes < config.clusters) {
    throw ConfigError("generate_synthetic: need nodes >= clusters >= 1 (nodes=" + std::to_string(config.nodes) +
                      ", clusters=" + std::to_string(config.clusters) + ")");
  }
  if (config.steps < kStepsPerDay) {
    throw ConfigError("generate_synthetic: steps must be >= 288, got " + std::to_string(config.steps));
  }
  if (config.noise_std < 0.0 || !std::isfinite(config.noise_std)) {
    throw ConfigError("generate_synthetic: noise_std must be finite and >= 0");
  }
  if (std::abs(config.ar_coefficient) >= 1.0) throw ConfigError("generate_synthetic: |ar_coefficient| must be < 1");

  Rng rng(config.seed);
  std::uniform_real_distribution<double> base_dist(60.0, 240.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> base(config.clusters);
  std::vector<double> phase(config.clusters);
  for (std::size_t c = 0; c < config.clusters; ++c) {
    base[c] = base_dist(rng);
    phase[c] = static_cast<double>(c) * 96.0 / static_cast<double>(config.clusters);
  }

  TrafficDataset ds;
  ds.name = config.name;
  ds.steps = config.steps;
  ds.nodes = config.nodes;
  fill_calendar(ds);
  ds.values.resize(ds.steps * ds.nodes);

  std::vector<double> ar(config.nodes, 0.0);
  for (std::size_t t = 0; t < ds.steps; ++t) {
    const double weekday = ds.dow[t] >= 5 ? -config.weekly_amplitude : 0.0;
    for (std::size_t n = 0; n < ds.nodes; ++n) {
      const std::size_t c = cluster_of(n, config.clusters);
      double v = base[c] * (diurnal_profile(static_cast<double>(ds.tod[t]) - phase[c]) + weekday);
      if (config.noise_std > 0.0) {
        ar[n] = config.ar_coefficient * ar[n] + config.noise_std * gauss(rng);
        v += ar[n] + config.noise_std * gauss(rng);
      }
      ds.values[t * ds.nodes + n] = std::max(0.0, v);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting and normalisation

SplitSpec SplitSpec::parse(const std::string& text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ':', ' ');
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::vector<double> parts;
  double v = 0.0;
  while (in >> v) parts.push_back(v);
  if (!in.eof() || parts.size() != 3) throw ConfigError("split: expected three ratios like 6:2:2, got '" + text + "'");
  const double total = parts[0] + parts[1] + parts[2];
  if (total <= 0.0) throw ConfigError("split: ratios must sum to a positive value");
  SplitSpec spec{parts[0] / total, parts[1] / total, parts[2] / total};
  spec.validate();
  return spec;
}

void SplitSpec::validate() const {
  if (train < 0.0 || val < 0.0 || test < 0.0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split: ratios must be nonnegative and sum to 1");
  }
}

namespace {

TrafficDataset sub_range(const TrafficDataset& ds, std::size_t begin, std::size_t end, const std::string& suffix) {
  TrafficDataset out;
  out.name = ds.name + suffix;
  out.steps = end - begin;
  out.nodes = ds.nodes;
  out.interval_minutes = ds.interval_minutes;
  out.values.assign(ds.values.begin() + static_cast<std::ptrdiff_t>(begin * ds.nodes),
                    ds.values.begin() + static_cast<std::ptrdiff_t>(end * ds.nodes));
  out.dow.assign(ds.dow.begin() + static_cast<std::ptrdiff_t>(begin), ds.dow.begin() + static_cast<std::ptrdiff_t>(end));
  out.tod.assign(ds.tod.begin() + static_cast<std::ptrdiff_t>(begin), ds.tod.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

}  // namespace

Splits chrono_split(const TrafficDataset& ds, const SplitSpec& spec) {
  spec.validate();
  const double steps = static_cast<double>(ds.steps);
  // The epsilon absorbs ratios like 0.7 + 0.1 landing a hair under 0.8.
  const auto b1 = static_cast<std::size_t>(std::floor(steps * spec.train + 1e-9));
  const auto b2 = std::min(ds.steps, static_cast<std::size_t>(std::floor(steps * (spec.train + spec.val) + 1e-9)));
  Splits s;
  s.val_begin = b1;
  s.test_begin = b2;
  s.train = sub_range(ds, 0, b1, ".train");
  s.val = sub_range(ds, b1, b2, ".val");
  s.test = sub_range(ds, b2, ds.steps, ".test");
  return s;
}

Normalizer Normalizer::fit(const TrafficDataset& train) {
  if (train.values.empty()) throw ConfigError("normalizer: cannot fit on an empty split");
  const double n = static_cast<double>(train.values.size());
  double mean = 0.0;
  for (double v : train.values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : train.values) var += (v - mean) * (v - mean);
  var /= n;
  // A constant training split keeps unit scale.
  return {mean, var > 0.0 ? std::sqrt(var) : 1.0};
}

// ---------------------------------------------------------------------------
// Windows

WindowSet::WindowSet(std::shared_ptr<const TrafficDataset> data, std::size_t frames, std::size_t horizon,
                     std::optional<Normalizer> normalizer)
    : data_(std::move(data)), frames_(frames), horizon_(horizon), count_(0), normalizer_(normalizer) {
  if (!data_) throw ContractError("make_windows: null dataset");
  if (frames_ == 0 || horizon_ == 0) throw ConfigError("make_windows: T and T_out must be positive");
  if (data_->steps < frames_ + horizon_) {
    throw ConfigError("make_windows: dataset '" + data_->name + "' has " + std::to_string(data_->steps) +
                      " steps, need at least T + T_out = " + std::to_string(frames_ + horizon_));
  }
  count_ = data_->steps - frames_ - horizon_ + 1;
}

WindowBatch WindowSet::batch(std::span<const std::size_t> sample_indices) const {
  const std::size_t b_count = sample_indices.size();
  const std::size_t n_count = data_->nodes;
  std::vector<double> x(b_count * frames_ * n_count);
  std::vector<double> y(b_count * horizon_ * n_count);
  WindowBatch out;
  out.calendar.batch = b_count;
  out.calendar.frames = frames_;
  out.calendar.dow.resize(b_count * frames_);
  out.calendar.tod.resize(b_count * frames_);
  out.starts.assign(sample_indices.begin(), sample_indices.end());
  for (std::size_t b = 0; b < b_count; ++b) {
    const std::size_t start = sample_indices[b];
    if (start >= count_) throw IndexError("window index " + std::to_string(start) + " out of range");
    for (std::size_t t = 0; t < frames_; ++t) {
      const std::size_t step = start + t;
      for (std::size_t n = 0; n < n_count; ++n) {
        const double v = data_->value(step, n);
        x[(b * frames_ + t) * n_count + n] = normalizer_ ? normalizer_->apply(v) : v;
      }
      out.calendar.dow[b * frames_ + t] = data_->dow[step];
      out.calendar.tod[b * frames_ + t] = data_->tod[step];
    }
    for (std::size_t t = 0; t < horizon_; ++t) {
      const std::size_t step = start + frames_ + t;
      for (std::size_t n = 0; n < n_count; ++n) y[(b * horizon_ + t) * n_count + n] = data_->value(step, n);
    }
  }
  out.x = Tensor({b_count, frames_, n_count, 1}, std::move(x));
  out.y = Tensor({b_count, horizon_, n_count, 1}, std::move(y));
  return out;
}

WindowBatch WindowSet::sample(std::size_t i) const {
  const std::size_t idx[1] = {i};
  return batch(idx);
}

WindowSet make_windows(TrafficDataset ds, std::size_t frames, std::size_t horizon,
                       std::optional<Normalizer> normalizer) {
  return WindowSet(std::make_shared<const TrafficDataset>(std::move(ds)), frames, horizon, normalizer);
}

// ---------------------------------------------------------------------------
// Temporal shuffle

namespace {

void check_permutation(std::span<const std::size_t> perm, std::size_t frames) {
  if (perm.size() != frames) {
    throw ContractError("temporal_shuffle: permutation has " + std::to_string(perm.size()) + " entries, expected " +
                        std::to_string(frames));
  }
  std::vector<bool> seen(frames, false);
  for (std::size_t p : perm) {
    if (p >= frames || seen[p]) throw ContractError("temporal_shuffle: not a permutation of 0.." + std::to_string(frames - 1));
    seen[p] = true;
  }
}

}  // namespace

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  check_permutation(perm, perm.size());
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

ShuffledInput temporal_shuffle(const Tensor& x, const CalendarIndices& calendar, std::span<const std::size_t> perm,
                               ShuffleMode mode) {
  if (x.ndim() != 4) throw ShapeError("temporal_shuffle: expected (B, T, N, C), got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t frames = x.dim(1);
  const std::size_t frame_size = x.dim(2) * x.dim(3);
  check_permutation(perm, frames);

  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < frames; ++t) {
      std::copy_n(xv.data() + (b * frames + perm[t]) * frame_size, frame_size,
                  out.data() + (b * frames + t) * frame_size);
    }
  }
  ShuffledInput result{Tensor(x.shape(), std::move(out)), calendar};
  if (mode == ShuffleMode::ValuesAndCalendar) {
    for (std::size_t b = 0; b < calendar.batch; ++b) {
      for (std::size_t t = 0; t < frames; ++t) {
        result.calendar.dow[b * frames + t] = calendar.dow[b * frames + perm[t]];
        result.calendar.tod[b * frames + t] = calendar.tod[b * frames + perm[t]];
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// STTS container

namespace {

constexpr char kMagic[4] = {'S', 'T', 'T', 'S'};

template <class T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<T>(bits);
}

std::string encode_container(const nlohmann::json& header, std::span<const double> values,
                             const TrafficDataset* calendar) {
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(kSttsVersion));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + values.size() * 8 + (calendar ? calendar->steps * 3 : 0));
  for (double v : values) put_le(out, v);
  if (calendar) {
    for (std::uint8_t d : calendar->dow) put_le(out, d);
    for (std::uint16_t t : calendar->tod) put_le(out, t);
  }
  return out;
}

struct Container {
  nlohmann::json header;
  std::size_t steps = 0;
  std::size_t nodes = 0;
  bool calendar = true;
  const char* payload = nullptr;
  std::size_t payload_size = 0;
};

Container decode_container(std::string_view bytes) {
  if (bytes.size() < 4) throw TruncationError("stts: file too short for magic (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw MagicError("stts: bad magic bytes, not an STTS file");
  if (bytes.size() < 9) throw TruncationError("stts: file ends inside the preamble");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kSttsVersion) throw ManifestError("stts: unsupported version " + std::to_string(version));
  const std::size_t header_len = get_le<std::uint32_t>(bytes.data() + 5);
  if (bytes.size() < 9 + header_len) throw TruncationError("stts: header declares " + std::to_string(header_len) + " bytes past end of file");

  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(9, header_len));
    if (c.header.at("dtype").get<std::string>() != "f64") throw ManifestError("stts: unsupported dtype");
    if (c.header.at("order").get<std::string>() != "row-major") throw ManifestError("stts: unsupported order");
    c.steps = c.header.at("steps").get<std::size_t>();
    c.nodes = c.header.at("nodes").get<std::size_t>();
    c.calendar = c.header.value("calendar", true);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("stts: malformed header: ") + e.what());
  }
  c.payload = bytes.data() + 9 + header_len;
  c.payload_size = bytes.size() - 9 - header_len;
  const std::size_t expected = c.steps * c.nodes * 8 + (c.calendar ? c.steps * 3 : 0);
  if (c.payload_size < expected) {
    throw TruncationError("stts: header declares " + std::to_string(c.steps) + "x" + std::to_string(c.nodes) +
                          " values (" + std::to_string(expected) + " payload bytes) but only " +
                          std::to_string(c.payload_size) + " remain");
  }
  if (c.payload_size > expected) {
    throw ManifestError("stts: " + std::to_string(c.payload_size - expected) + " trailing bytes beyond declared payload");
  }
  return c;
}

}  // namespace

std::string encode_stts(const TrafficDataset& ds) {
  ds.validate();
  nlohmann::json header = {{"name", ds.name},
                           {"steps", ds.steps},
                           {"nodes", ds.nodes},
                           {"interval_minutes", ds.interval_minutes},
                           {"dtype", "f64"},
                           {"order", "row-major"}};
  return encode_container(header, ds.values, &ds);
}

TrafficDataset parse_stts(std::string_view bytes) {
  const Container c = decode_container(bytes);
  if (!c.calendar) throw ManifestError("stts: file holds a tensor dump, not a dataset");
  TrafficDataset ds;
  try {
    ds.name = c.header.value("name", std::string("dataset"));
    ds.interval_minutes = c.header.value("interval_minutes", 5);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("stts: malformed header: ") + e.what());
  }
  ds.steps = c.steps;
  ds.nodes = c.nodes;
  const std::size_t n = c.steps * c.nodes;
  ds.values.resize(n);
  const char* p = c.payload;
  for (std::size_t i = 0; i < n; ++i, p += 8) ds.values[i] = get_le<double>(p);
  ds.dow.resize(c.steps);
  ds.tod.resize(c.steps);
  for (std::size_t i = 0; i < c.steps; ++i, ++p) ds.dow[i] = get_le<std::uint8_t>(p);
  for (std::size_t i = 0; i < c.steps; ++i, p += 2) ds.tod[i] = get_le<std::uint16_t>(p);
  ds.validate();
  return ds;
}

void save_stts(const TrafficDataset& ds, const std::filesystem::path& path) { write_file_atomic(path, encode_stts(ds)); }

TrafficDataset load_stts(const std::filesystem::path& path) { return parse_stts(read_file(path)); }

void save_stts_tensor(const std::string& name, const Tensor& tensor, const std::filesystem::path& path) {
  const Shape& s = tensor.shape();
  if (s.empty()) throw ShapeError("save_stts_tensor: scalar tensors are not supported");
  nlohmann::json header = {{"name", name},
                           {"steps", s[0]},
                           {"nodes", tensor.numel() / s[0]},
                           {"interval_minutes", 5},
                           {"dtype", "f64"},
                           {"order", "row-major"},
                           {"calendar", false},
                           {"shape", s}};
  write_file_atomic(path, encode_container(header, tensor.values(), nullptr));
}

Tensor load_stts_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Container c = decode_container(bytes);
  Shape shape;
  try {
    shape = c.header.contains("shape") ? c.header.at("shape").get<Shape>() : Shape{c.steps, c.nodes};
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("stts: malformed shape: ") + e.what());
  }
  if (numel(shape) != c.steps * c.nodes) throw ManifestError("stts: shape " + shape_str(shape) + " disagrees with steps x nodes");
  std::vector<double> values(numel(shape));
  const char* p = c.payload;
  for (double& v : values) {
    v = get_le<double>(p);
    p += 8;
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace stae
