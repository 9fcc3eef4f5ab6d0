#include "stae/model.hpp"

#include <algorithm>
#include <bit>
#include <sstream>

#include "stae/error.hpp"
#include "stae/io.hpp"

namespace stae {

// ---------------------------------------------------------------------------
// Variants

ModelVariant ModelVariant::parse(const std::string& tag) {
  ModelVariant v;
  bool removed_adaptive = false;
  std::istringstream in(tag);
  std::string part;
  bool any = false;
  while (std::getline(in, part, '+')) {
    any = true;
    if (part == "full") {
      continue;
    } else if (part == "no_Ea") {
      v.adaptive = false;
      removed_adaptive = true;
    } else if (part == "no_Ep") {
      v.periodicity = false;
    } else if (part == "no_TTrans") {
      v.temporal = false;
    } else if (part == "no_STTrans") {
      v.temporal = false;
      v.spatial = false;
    } else if (part == "no_SpatialTrans") {
      v.spatial = false;
    } else if (part == "Es_instead_of_Ea" || part == "Es") {
      v.adaptive = false;
      v.spatial_embedding = true;
    } else {
      throw ConfigError("unknown model variant tag '" + part + "'");
    }
  }
  if (!any) throw ConfigError("empty model variant tag");
  if (removed_adaptive && v.spatial_embedding) throw ConfigError("variant '" + tag + "' both removes and replaces E_a");
  return v;
}

std::string ModelVariant::tag() const {
  std::vector<std::string> parts;
  if (!adaptive && !spatial_embedding) parts.push_back("no_Ea");
  if (!periodicity) parts.push_back("no_Ep");
  if (!temporal && !spatial) {
    parts.push_back("no_STTrans");
  } else if (!temporal) {
    parts.push_back("no_TTrans");
  } else if (!spatial) {
    parts.push_back("no_SpatialTrans");
  }
  if (spatial_embedding) parts.push_back("Es_instead_of_Ea");
  if (parts.empty()) return "full";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

// ---------------------------------------------------------------------------
// Config

std::size_t ModelConfig::hidden() const {
  std::size_t d = d_f;
  if (variant.periodicity) d += 2 * d_f;
  if (variant.adaptive || variant.spatial_embedding) d += d_a;
  return d;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (frames < 1 || horizon < 1 || nodes < 1) fail("T, T_out and N must be >= 1");
  if (d_f < 1) fail("d_f must be >= 1");
  if ((variant.adaptive || variant.spatial_embedding) && d_a < 1) fail("d_a must be >= 1");
  if (variant.adaptive && variant.spatial_embedding) fail("E_a and E_s are mutually exclusive");
  const bool any_stack = variant.temporal || variant.spatial;
  if (layers == 0 && variant.temporal && variant.spatial) fail("L may be 0 only in a no_*Trans variant");
  if (any_stack && layers > 0) {
    if (heads < 1) fail("heads must be >= 1");
    if (hidden() % heads != 0) {
      fail("hidden width " + std::to_string(hidden()) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (d_ff < 1) fail("d_ff must be >= 1");
  }
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
}

ModelConfig ModelConfig::from_config(const ConfigMap& map, const ModelConfig& defaults) {
  ModelConfig c = defaults;
  c.frames = map.get_size("T", c.frames);
  c.horizon = map.get_size("T_out", c.horizon);
  c.nodes = map.get_size("nodes", c.nodes);
  c.d_f = map.get_size("d_f", c.d_f);
  c.d_a = map.get_size("d_a", c.d_a);
  c.heads = map.get_size("heads", c.heads);
  c.layers = map.get_size("layers", c.layers);
  c.d_ff = map.get_size("d_ff", c.d_ff);
  c.dropout = map.get_double("dropout", c.dropout);
  if (map.contains("attention_scale")) {
    const std::string s = map.raw("attention_scale");
    if (s == "per_head") {
      c.attention_scale = AttentionScale::PerHead;
    } else if (s == "hidden") {
      c.attention_scale = AttentionScale::Hidden;
    } else {
      throw ConfigError("config: attention_scale must be per_head or hidden, got '" + s + "'");
    }
  }
  if (map.contains("norm_order")) {
    const std::string s = map.raw("norm_order");
    if (s == "post") {
      c.norm = NormOrder::Post;
    } else if (s == "pre") {
      c.norm = NormOrder::Pre;
    } else {
      throw ConfigError("config: norm_order must be post or pre, got '" + s + "'");
    }
  }
  if (map.contains("variant")) c.variant = ModelVariant::parse(map.raw("variant"));
  return c;
}

ModelConfig ModelConfig::from_config(const ConfigMap& map) { return from_config(map, ModelConfig{}); }

void ModelConfig::write_to(ConfigMap& map, const std::string& prefix) const {
  map.set(prefix + "T", std::to_string(frames));
  map.set(prefix + "T_out", std::to_string(horizon));
  map.set(prefix + "nodes", std::to_string(nodes));
  map.set(prefix + "d_f", std::to_string(d_f));
  map.set(prefix + "d_a", std::to_string(d_a));
  map.set(prefix + "heads", std::to_string(heads));
  map.set(prefix + "layers", std::to_string(layers));
  map.set(prefix + "d_ff", std::to_string(d_ff));
  map.set(prefix + "dropout", format_double(dropout));
  map.set(prefix + "attention_scale", attention_scale == AttentionScale::PerHead ? "per_head" : "hidden");
  map.set(prefix + "norm_order", norm == NormOrder::Post ? "post" : "pre");
  map.set(prefix + "variant", variant.tag());
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), dropout_rng_(seed ^ 0x9E3779B97F4A7C15ull) {
  config_.validate();
  Rng rng(seed);
  const ModelVariant& v = config_.variant;
  feature_ = FeatureProjection::init(config_.d_f, rng);
  if (v.periodicity) periodicity_ = PeriodicityTables::init(config_.d_f, rng);
  if (v.adaptive) adaptive_ = AdaptiveEmbedding::init(config_.frames, config_.nodes, config_.d_a, rng);
  if (v.spatial_embedding) spatial_embedding_ = SpatialEmbedding::init(config_.nodes, config_.d_a, rng);
  const std::size_t d_h = config_.hidden();
  if (v.temporal) {
    for (std::size_t l = 0; l < config_.layers; ++l) temporal_.push_back(EncoderLayerParams::init(d_h, config_.d_ff, rng));
  }
  if (v.spatial) {
    for (std::size_t l = 0; l < config_.layers; ++l) spatial_.push_back(EncoderLayerParams::init(d_h, config_.d_ff, rng));
  }
  head_weight_ = xavier_uniform({config_.frames * d_h, config_.horizon}, rng);
  head_bias_ = Tensor::zeros({config_.horizon}, true);
}

Model Model::clone() const {
  Model copy(config_, 0);
  copy.copy_parameters_from(*this);
  copy.dropout_rng_ = dropout_rng_;
  copy.trained_ = trained_;
  return copy;
}

void Model::copy_parameters_from(const Model& other) {
  auto mine = parameters();
  const auto theirs = other.parameters();
  if (mine.size() != theirs.size()) throw ContractError("copy_parameters_from: architectures differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name || mine[i].tensor.shape() != theirs[i].tensor.shape()) {
      throw ContractError("copy_parameters_from: parameter '" + mine[i].name + "' does not match");
    }
    auto dst = mine[i].tensor.mutable_values();
    const auto src = theirs[i].tensor.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor Model::embed(const Tensor& x, const CalendarIndices& calendar) const {
  if (x.ndim() != 4 || x.dim(1) != config_.frames || x.dim(2) != config_.nodes || x.dim(3) != 1) {
    throw ShapeError("forward[input]: expected (B, " + std::to_string(config_.frames) + ", " +
                     std::to_string(config_.nodes) + ", 1), got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  if (calendar.batch != batch || calendar.frames != config_.frames) {
    throw ShapeError("forward[calendar]: grid is " + std::to_string(calendar.batch) + "x" +
                     std::to_string(calendar.frames) + ", expected " + std::to_string(batch) + "x" +
                     std::to_string(config_.frames));
  }
  const Tensor e_f = feature_embed(feature_, x);
  const Tensor e_p = periodicity_ ? periodicity_embed(*periodicity_, calendar, config_.nodes) : Tensor();
  Tensor e_a;
  if (adaptive_) {
    e_a = adaptive_embed(*adaptive_, batch);
  } else if (spatial_embedding_) {
    e_a = spatial_embed(*spatial_embedding_, batch, config_.frames);
  }
  return assemble_hidden(e_f, e_p, e_a);
}

Tensor Model::forward(const Tensor& x, const CalendarIndices& calendar, bool train) const {
  LayerOptions options;
  options.heads = config_.heads;
  options.scale = config_.attention_scale;
  options.norm = config_.norm;
  options.dropout = config_.dropout;

  Tensor z = embed(x, calendar);
  z = encoder_stack(z, Axis::Temporal, temporal_, options, train, dropout_rng_);
  z = encoder_stack(z, Axis::Spatial, spatial_, options, train, dropout_rng_);

  // Regression head: per node, flatten (T × d_h) and map to T_out.
  const std::size_t batch = z.dim(0);
  const std::size_t d_h = z.dim(3);
  const Tensor per_node = reshape(permute(z, {0, 2, 1, 3}), {batch, config_.nodes, config_.frames * d_h});
  const Tensor out = affine(per_node, head_weight_, head_bias_);
  return reshape(permute(out, {0, 2, 1}), {batch, config_.horizon, config_.nodes, 1});
}

std::vector<NamedParam> Model::parameters() const {
  std::vector<NamedParam> out{{"embedding.feature.weight", feature_.weight}, {"embedding.feature.bias", feature_.bias}};
  if (periodicity_) {
    out.push_back({"embedding.day_of_week", periodicity_->day_of_week});
    out.push_back({"embedding.time_of_day", periodicity_->time_of_day});
  }
  if (adaptive_) out.push_back({"embedding.adaptive", adaptive_->table});
  if (spatial_embedding_) out.push_back({"embedding.spatial", spatial_embedding_->table});
  for (std::size_t l = 0; l < temporal_.size(); ++l) {
    auto named = temporal_[l].named("temporal." + std::to_string(l));
    out.insert(out.end(), named.begin(), named.end());
  }
  for (std::size_t l = 0; l < spatial_.size(); ++l) {
    auto named = spatial_[l].named("spatial." + std::to_string(l));
    out.insert(out.end(), named.begin(), named.end());
  }
  out.push_back({"head.weight", head_weight_});
  out.push_back({"head.bias", head_bias_});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.numel();
  return total;
}

Model build_variant(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

std::size_t parameter_count(const Model& model) { return model.parameter_count(); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointFormat = "stae-checkpoint-v1";

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

void parse_param_entry(const std::string& text, Shape& shape, std::size_t& offset) {
  const auto at = text.find('@');
  if (at == std::string::npos) throw ManifestError("checkpoint: parameter entry '" + text + "' lacks '@ offset'");
  std::istringstream dims(text.substr(0, at));
  std::string token;
  shape.clear();
  std::string shape_text;
  dims >> shape_text;
  std::istringstream parts(shape_text);
  try {
    while (std::getline(parts, token, 'x')) shape.push_back(std::stoull(token));
    offset = std::stoull(text.substr(at + 1));
  } catch (const std::exception&) {
    throw ManifestError("checkpoint: malformed parameter entry '" + text + "'");
  }
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& prefix) {
  std::filesystem::path p = prefix;
  p += ".manifest";
  return p;
}

std::filesystem::path blob_path(const std::filesystem::path& prefix) {
  std::filesystem::path p = prefix;
  p += ".bin";
  return p;
}

void save_checkpoint(const Model& model, const std::optional<Normalizer>& normalizer,
                     const std::filesystem::path& prefix) {
  std::string blob;
  std::string params;
  for (const auto& p : model.parameters()) {
    params += "param." + p.name + " = " + shape_token(p.tensor.shape()) + " @ " + std::to_string(blob.size()) + "\n";
    for (double v : p.tensor.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  ConfigMap header;
  header.set("format", kCheckpointFormat);
  header.set("blob", blob_path(prefix).filename().string());
  header.set("blob_bytes", std::to_string(blob.size()));
  header.set("trained", model.trained() ? "true" : "false");
  model.config().write_to(header, "config.");
  if (normalizer) {
    header.set("normalizer.mean", format_double(normalizer->mean));
    header.set("normalizer.std", format_double(normalizer->std));
  }
  write_file_atomic(blob_path(prefix), blob);
  write_file_atomic(manifest_path(prefix), "# stae checkpoint\n" + header.to_text() + params);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& prefix) {
  const std::string text = read_file(manifest_path(prefix));
  ConfigMap manifest;
  try {
    manifest = ConfigMap::parse(text, manifest_path(prefix).string());
  } catch (const ConfigError& e) {
    throw ManifestError(std::string("checkpoint: ") + e.what());
  }
  if (manifest.get_string("format", "") != kCheckpointFormat) {
    throw ManifestError("checkpoint: " + manifest_path(prefix).string() + " is not a " + kCheckpointFormat + " manifest");
  }
  ConfigMap config_keys;
  for (const auto& [k, v] : manifest.entries()) {
    if (k.rfind("config.", 0) == 0) config_keys.set(k.substr(7), v);
  }
  std::optional<Model> model;
  std::optional<Normalizer> normalizer;
  std::size_t declared_bytes = 0;
  try {
    model.emplace(ModelConfig::from_config(config_keys), 0);
    model->set_trained(manifest.get_bool("trained", false));
    if (manifest.contains("normalizer.mean")) {
      normalizer = Normalizer{manifest.get_double("normalizer.mean", 0.0), manifest.get_double("normalizer.std", 1.0)};
    }
    declared_bytes = manifest.get_size("blob_bytes", 0);
  } catch (const ConfigError& e) {
    throw ManifestError(std::string("checkpoint: ") + e.what());
  }

  const std::string blob = read_file(blob_path(prefix));
  if (blob.size() != declared_bytes) {
    throw TruncationError("checkpoint: blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                          std::to_string(declared_bytes));
  }
  std::size_t param_keys = 0;
  for (const auto& [k, v] : manifest.entries()) param_keys += k.rfind("param.", 0) == 0;
  auto params = model->parameters();
  if (param_keys != params.size()) {
    throw ManifestError("checkpoint: manifest lists " + std::to_string(param_keys) + " parameters, model has " +
                        std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string key = "param." + p.name;
    if (!manifest.contains(key)) throw ManifestError("checkpoint: missing parameter '" + p.name + "'");
    Shape shape;
    std::size_t offset = 0;
    parse_param_entry(manifest.raw(key), shape, offset);
    if (shape != p.tensor.shape()) {
      throw ManifestError("checkpoint: parameter '" + p.name + "' has shape " + shape_str(shape) + ", expected " +
                          shape_str(p.tensor.shape()));
    }
    if (offset + p.tensor.numel() * 8 > blob.size()) {
      throw TruncationError("checkpoint: parameter '" + p.name + "' extends past the end of the blob");
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[offset + i * 8 + b])) << (8 * b);
      }
      dst[i] = std::bit_cast<double>(bits);
    }
  }
  return {std::move(*model), normalizer};
}

}  // namespace stae
