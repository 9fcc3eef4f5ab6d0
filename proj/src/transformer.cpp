#include "stae/transformer.hpp"

#include <cmath>

#include "stae/error.hpp"

namespace stae {

EncoderLayerParams EncoderLayerParams::init(std::size_t d_h, std::size_t d_ff, Rng& rng) {
  if (d_h == 0 || d_ff == 0) throw ConfigError("encoder layer: d_h and d_ff must be positive");
  EncoderLayerParams p;
  p.w_q = xavier_uniform({d_h, d_h}, rng);
  p.w_k = xavier_uniform({d_h, d_h}, rng);
  p.w_v = xavier_uniform({d_h, d_h}, rng);
  p.w_o = xavier_uniform({d_h, d_h}, rng);
  p.ffn_w1 = xavier_uniform({d_h, d_ff}, rng);
  p.ffn_b1 = Tensor::zeros({d_ff}, true);
  p.ffn_w2 = xavier_uniform({d_ff, d_h}, rng);
  p.ffn_b2 = Tensor::zeros({d_h}, true);
  p.ln1_gain = Tensor::full({d_h}, 1.0, true);
  p.ln1_bias = Tensor::zeros({d_h}, true);
  p.ln2_gain = Tensor::full({d_h}, 1.0, true);
  p.ln2_bias = Tensor::zeros({d_h}, true);
  return p;
}

std::vector<NamedParam> EncoderLayerParams::named(const std::string& prefix) const {
  return {
      {prefix + ".w_q", w_q},         {prefix + ".w_k", w_k},           {prefix + ".w_v", w_v},
      {prefix + ".w_o", w_o},         {prefix + ".ffn_w1", ffn_w1},     {prefix + ".ffn_b1", ffn_b1},
      {prefix + ".ffn_w2", ffn_w2},   {prefix + ".ffn_b2", ffn_b2},     {prefix + ".ln1_gain", ln1_gain},
      {prefix + ".ln1_bias", ln1_bias}, {prefix + ".ln2_gain", ln2_gain}, {prefix + ".ln2_bias", ln2_bias},
  };
}

namespace {

// (B, G, S, d) -> (B, G, H, S, d/H)
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const Shape& s = x.shape();
  return permute(reshape(x, {s[0], s[1], s[2], heads, s[3] / heads}), {0, 1, 3, 2, 4});
}

}  // namespace

Tensor self_attention_axis(const Tensor& z, Axis axis, const EncoderLayerParams& params, std::size_t heads,
                           AttentionScale scale, Tensor* weights) {
  if (z.ndim() != 4) throw ShapeError("self_attention_axis: expected (B, T, N, d_h), got " + shape_str(z.shape()));
  const std::size_t d_h = z.dim(3);
  if (d_h != params.hidden()) {
    throw ShapeError("self_attention_axis: input width " + std::to_string(d_h) + " does not match parameters " +
                     std::to_string(params.hidden()));
  }
  if (heads == 0 || d_h % heads != 0) {
    throw ConfigError("self_attention_axis: hidden width " + std::to_string(d_h) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }

  // Bring the attended axis to position 2: (B, G, S, d_h).
  const Tensor x = axis == Axis::Temporal ? permute(z, {0, 2, 1, 3}) : z;
  const Shape& xs = x.shape();
  const std::size_t head_dim = d_h / heads;
  const double divisor = std::sqrt(static_cast<double>(scale == AttentionScale::PerHead ? head_dim : d_h));

  const Tensor q = split_heads(matmul(x, params.w_q), heads);
  const Tensor k = split_heads(matmul(x, params.w_k), heads);
  const Tensor v = split_heads(matmul(x, params.w_v), heads);
  const Tensor logits = stae::scale(matmul(q, permute(k, {0, 1, 2, 4, 3})), 1.0 / divisor);
  const Tensor attn = softmax_last(logits);
  if (weights) *weights = attn;

  const Tensor mixed = reshape(permute(matmul(attn, v), {0, 1, 3, 2, 4}), {xs[0], xs[1], xs[2], d_h});
  const Tensor out = matmul(mixed, params.w_o);
  return axis == Axis::Temporal ? permute(out, {0, 2, 1, 3}) : out;
}

Tensor feed_forward(const Tensor& u, const EncoderLayerParams& params) {
  return affine(relu(affine(u, params.ffn_w1, params.ffn_b1)), params.ffn_w2, params.ffn_b2);
}

Tensor encoder_layer(const Tensor& z, Axis axis, const EncoderLayerParams& params, const LayerOptions& options,
                     bool train, Rng& rng) {
  if (options.norm == NormOrder::Post) {
    const Tensor attended = self_attention_axis(z, axis, params, options.heads, options.scale);
    const Tensor u = layer_norm(z + dropout(attended, options.dropout, train, rng), params.ln1_gain,
                                params.ln1_bias, options.ln_eps);
    const Tensor ff = feed_forward(u, params);
    return layer_norm(u + dropout(ff, options.dropout, train, rng), params.ln2_gain, params.ln2_bias,
                      options.ln_eps);
  }
  const Tensor n1 = layer_norm(z, params.ln1_gain, params.ln1_bias, options.ln_eps);
  const Tensor u = z + dropout(self_attention_axis(n1, axis, params, options.heads, options.scale),
                               options.dropout, train, rng);
  const Tensor n2 = layer_norm(u, params.ln2_gain, params.ln2_bias, options.ln_eps);
  return u + dropout(feed_forward(n2, params), options.dropout, train, rng);
}

Tensor encoder_stack(const Tensor& z, Axis axis, std::span<const EncoderLayerParams> layers,
                     const LayerOptions& options, bool train, Rng& rng) {
  Tensor h = z;
  for (const auto& layer : layers) h = encoder_layer(h, axis, layer, options, train, rng);
  return h;
}

}  // namespace stae
