#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stae/config.hpp"
#include "stae/data.hpp"
#include "stae/embedding.hpp"
#include "stae/grad_check.hpp"
#include "stae/transformer.hpp"

namespace stae {

// Ablation switches. Tags compose with '+', e.g. "no_STTrans+no_Ep+no_Ea".
struct ModelVariant {
  bool adaptive = true;           // E_a present
  bool periodicity = true;        // E_p present
  bool temporal = true;           // temporal encoder stack present
  bool spatial = true;            // spatial encoder stack present
  bool spatial_embedding = false;  // node-only E_s in place of E_a

  static ModelVariant parse(const std::string& tag);
  std::string tag() const;
  bool operator==(const ModelVariant&) const = default;
};

struct ModelConfig {
  std::size_t frames = 12;   // T
  std::size_t horizon = 12;  // T_out
  std::size_t nodes = 170;   // N
  std::size_t d_f = 24;
  std::size_t d_a = 80;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t d_ff = 256;
  double dropout = 0.1;
  AttentionScale attention_scale = AttentionScale::PerHead;
  NormOrder norm = NormOrder::Post;
  ModelVariant variant;

  // d_f + (2·d_f if E_p) + (d_a if E_a or E_s)
  std::size_t hidden() const;
  void validate() const;

  // Reads the model keys of a flat config; absent keys keep `defaults`.
  static ModelConfig from_config(const ConfigMap& map, const ModelConfig& defaults);
  static ModelConfig from_config(const ConfigMap& map);
  void write_to(ConfigMap& map, const std::string& prefix = "") const;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  // Parameters are shared handles, so copies would alias; use clone().
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  Model clone() const;

  const ModelConfig& config() const { return config_; }

  // x (B × T × N × 1), calendar (B × T) -> Ŷ (B × T_out × N × 1).
  // Deterministic when train is false.
  Tensor forward(const Tensor& x, const CalendarIndices& calendar, bool train) const;

  // Embedding output Z before any encoder layer.
  Tensor embed(const Tensor& x, const CalendarIndices& calendar) const;

  // Every learnable tensor, in a fixed order with dotted path names.
  std::vector<NamedParam> parameters() const;
  std::size_t parameter_count() const;

  const FeatureProjection& feature() const { return feature_; }
  const std::optional<PeriodicityTables>& periodicity() const { return periodicity_; }
  const std::optional<AdaptiveEmbedding>& adaptive() const { return adaptive_; }
  const std::optional<SpatialEmbedding>& spatial_embedding() const { return spatial_embedding_; }
  const std::vector<EncoderLayerParams>& temporal_layers() const { return temporal_; }
  const std::vector<EncoderLayerParams>& spatial_layers() const { return spatial_; }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }

  bool trained() const { return trained_; }
  void set_trained(bool flag) { trained_ = flag; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  // Copies parameter values from `other`, which must share the architecture.
  void copy_parameters_from(const Model& other);

 private:
  ModelConfig config_;
  FeatureProjection feature_;
  std::optional<PeriodicityTables> periodicity_;
  std::optional<AdaptiveEmbedding> adaptive_;
  std::optional<SpatialEmbedding> spatial_embedding_;
  std::vector<EncoderLayerParams> temporal_;
  std::vector<EncoderLayerParams> spatial_;
  Tensor head_weight_;  // (T·d_h × T_out), shared by every node
  Tensor head_bias_;    // (T_out)
  mutable Rng dropout_rng_;
  bool trained_ = false;
};

Model build_variant(const ModelConfig& config, std::uint64_t seed);
std::size_t parameter_count(const Model& model);

// Checkpoint = <prefix>.manifest (text) + <prefix>.bin (little-endian f64).
struct LoadedCheckpoint {
  Model model;
  std::optional<Normalizer> normalizer;
};

void save_checkpoint(const Model& model, const std::optional<Normalizer>& normalizer,
                     const std::filesystem::path& prefix);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& prefix);

std::filesystem::path manifest_path(const std::filesystem::path& prefix);
std::filesystem::path blob_path(const std::filesystem::path& prefix);

}  // namespace stae
