#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stae/grad_check.hpp"
#include "stae/tensor.hpp"

namespace stae {

// Which axis of a (B × T × N × d_h) representation attention mixes over.
enum class Axis { Temporal, Spatial };

// PerHead divides logits by sqrt(d_h / heads); Hidden by sqrt(d_h).
enum class AttentionScale { PerHead, Hidden };

enum class NormOrder { Post, Pre };

struct EncoderLayerParams {
  Tensor w_q, w_k, w_v, w_o;  // (d_h × d_h), no bias
  Tensor ffn_w1, ffn_b1;      // d_h -> d_ff
  Tensor ffn_w2, ffn_b2;      // d_ff -> d_h
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;

  static EncoderLayerParams init(std::size_t d_h, std::size_t d_ff, Rng& rng);

  std::size_t hidden() const { return w_q.dim(0); }
  std::vector<NamedParam> named(const std::string& prefix) const;
};

struct LayerOptions {
  std::size_t heads = 4;
  AttentionScale scale = AttentionScale::PerHead;
  NormOrder norm = NormOrder::Post;
  double dropout = 0.1;
  double ln_eps = 1e-5;
};

// Multi-head self-attention along `axis`, followed by the W_O projection.
// When `weights` is non-null it receives the attention probabilities with
// shape (B × G × heads × S × S), where S is the attended axis and G the other.
Tensor self_attention_axis(const Tensor& z, Axis axis, const EncoderLayerParams& params,
                           std::size_t heads, AttentionScale scale = AttentionScale::PerHead,
                           Tensor* weights = nullptr);

// affine -> ReLU -> affine, position-wise.
Tensor feed_forward(const Tensor& u, const EncoderLayerParams& params);

// Post-norm: u = LN1(z + Drop(Attn(z))); out = LN2(u + Drop(FFN(u))).
Tensor encoder_layer(const Tensor& z, Axis axis, const EncoderLayerParams& params, const LayerOptions& options,
                     bool train, Rng& rng);

// Applies the layers in order; an empty stack is the identity.
Tensor encoder_stack(const Tensor& z, Axis axis, std::span<const EncoderLayerParams> layers,
                     const LayerOptions& options, bool train, Rng& rng);

}  // namespace stae
