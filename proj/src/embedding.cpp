#include "stae/embedding.hpp"

#include <cmath>

#include "stae/error.hpp"

namespace stae {

FeatureProjection FeatureProjection::init(std::size_t d_f, Rng& rng) {
  if (d_f == 0) throw ConfigError("feature projection: d_f must be positive");
  return {xavier_uniform({1, d_f}, rng), Tensor::zeros({d_f}, true)};
}

PeriodicityTables PeriodicityTables::init(std::size_t d_f, Rng& rng) {
  if (d_f == 0) throw ConfigError("periodicity tables: d_f must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_f));
  PeriodicityTables t;
  t.day_of_week = uniform({kDaysPerWeek, d_f}, -bound, bound, rng);
  t.time_of_day = uniform({kStepsPerDay, d_f}, -bound, bound, rng);
  return t;
}

AdaptiveEmbedding AdaptiveEmbedding::init(std::size_t frames, std::size_t nodes, std::size_t d_a, Rng& rng) {
  if (frames == 0 || nodes == 0 || d_a == 0) throw ConfigError("adaptive embedding: dimensions must be positive");
  return {xavier_uniform({frames, nodes, d_a}, rng)};
}

SpatialEmbedding SpatialEmbedding::init(std::size_t nodes, std::size_t d_s, Rng& rng) {
  if (nodes == 0 || d_s == 0) throw ConfigError("spatial embedding: dimensions must be positive");
  return {xavier_uniform({nodes, d_s}, rng)};
}

Tensor feature_embed(const FeatureProjection& proj, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(-1) != 1) {
    throw ShapeError("feature_embed: expected (B, T, N, 1) input, got " + shape_str(x.shape()));
  }
  return affine(x, proj.weight, proj.bias);
}

Tensor periodicity_embed(const PeriodicityTables& tables, const CalendarIndices& calendar, std::size_t nodes) {
  const std::size_t cells = calendar.batch * calendar.frames;
  if (calendar.dow.size() != cells || calendar.tod.size() != cells) {
    throw ShapeError("periodicity_embed: calendar grid holds " + std::to_string(calendar.dow.size()) + "/" +
                     std::to_string(calendar.tod.size()) + " indices, expected " + std::to_string(cells));
  }
  const Shape grid{calendar.batch, calendar.frames};
  const Tensor week = gather_rows(tables.day_of_week, calendar.dow, grid);
  const Tensor day = gather_rows(tables.time_of_day, calendar.tod, grid);
  const std::size_t width = week.dim(-1) + day.dim(-1);
  const Tensor both = reshape(concat_last({week, day}), {calendar.batch, calendar.frames, 1, width});
  return broadcast_to(both, {calendar.batch, calendar.frames, nodes, width});
}

Tensor adaptive_embed(const AdaptiveEmbedding& emb, std::size_t batch) {
  const Shape& s = emb.table.shape();
  return broadcast_to(reshape(emb.table, {1, s[0], s[1], s[2]}), {batch, s[0], s[1], s[2]});
}

Tensor spatial_embed(const SpatialEmbedding& emb, std::size_t batch, std::size_t frames) {
  const Shape& s = emb.table.shape();
  return broadcast_to(reshape(emb.table, {1, 1, s[0], s[1]}), {batch, frames, s[0], s[1]});
}

Tensor assemble_hidden(const Tensor& e_f, const Tensor& e_p, const Tensor& e_a) {
  if (!e_f.defined()) throw ShapeError("assemble_hidden: feature embedding is required");
  std::vector<Tensor> parts{e_f};
  if (e_p.defined()) {
    if (e_p.dim(-1) != 2 * e_f.dim(-1)) {
      throw ShapeError("assemble_hidden: periodicity width " + std::to_string(e_p.dim(-1)) +
                       " must be twice the feature width " + std::to_string(e_f.dim(-1)));
    }
    parts.push_back(e_p);
  }
  if (e_a.defined()) parts.push_back(e_a);
  return concat_last(parts);
}

}  // namespace stae
