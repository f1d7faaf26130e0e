#pragma once

// Transformer blocks with the hybrid Pre-LayerNorm / Post-RMSNorm wiring,
// and the encoder and decoder stacks built from them.

#include <vector>

#include "forge/attention.hpp"
#include "forge/config.hpp"
#include "forge/vision.hpp"

namespace forge {

template <class T>
struct BlockParams {
  NormKind kind = NormKind::PreLayerNorm;
  AttentionParams<T> attn;
  Tensor<T> w1, w3, w2;  // SwiGLU: [d x h], [d x h], [h x d]
  Tensor<T> norm1_gain, norm2_gain;
  Tensor<T> norm1_bias, norm2_bias;  // PreLayerNorm only
};

/// PreLayerNorm:  h = x + Attn(LN(x));     out = h + FFN(LN(h))
/// PostRMSNorm:   h = RMS(x + Attn(x));    out = RMS(h + FFN(h))
template <class T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& b, std::size_t heads,
                        const SequenceLayout<T>& layout, bool use_qk_norm) {
  auto ffn = [&](const Tensor<T>& in) { return swiglu_ffn(in, b.w1, b.w3, b.w2); };
  if (b.kind == NormKind::PreLayerNorm) {
    auto h = add(x, mha_forward(layer_norm(x, b.norm1_gain, b.norm1_bias), b.attn, heads,
                                layout, use_qk_norm));
    return add(h, ffn(layer_norm(h, b.norm2_gain, b.norm2_bias)));
  }
  auto h = rms_norm(add(x, mha_forward(x, b.attn, heads, layout, use_qk_norm)), b.norm1_gain);
  return rms_norm(add(h, ffn(h)), b.norm2_gain);
}

template <class T>
struct EncoderParams {
  std::map<std::size_t, PatchEmbedding<T>> patch_embed;  // keyed by patch size
  PosBiasTable<T> pos_bias;
  std::vector<BlockParams<T>> blocks;
};

template <class T>
struct DecoderParams {
  Tensor<T> embed;  // [V x d]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_gain;  // RMSNorm before the vocabulary projection
  Tensor<T> head;        // [d x V]
};

/// Bidirectional stack over packed patch tokens (one segment per image).
/// `rows`/`cols` carry each token's grid coordinate for 2D rotary encoding.
template <class T>
Tensor<T> encoder_forward(const Tensor<T>& tokens, std::span<const std::int32_t> rows,
                          std::span<const std::int32_t> cols,
                          const std::vector<Segment>& segments, const EncoderParams<T>& enc,
                          const ModelConfig& cfg) {
  for (const auto& s : segments) {
    if (s.length > cfg.patch_budget) {
      throw ContractError("encoder: " + std::to_string(s.length) +
                          " patch tokens exceed the budget of " +
                          std::to_string(cfg.patch_budget));
    }
  }
  RopeContext ctx = make_rope_context(cfg.rope_theta, cfg.enc_head_dim(), 0, 0);
  SequenceLayout<T> layout{segments, rope_table_2d<T>(rows, cols, ctx), false};
  Tensor<T> x = tokens;
  for (const auto& b : enc.blocks) x = block_forward(x, b, cfg.enc_heads, layout, cfg.qk_norm_encoder);
  return x;
}

/// Rotary context for a decoder that runs sequences of up to `context_len`.
inline RopeContext decoder_rope_context(const ModelConfig& cfg, std::size_t context_len) {
  const std::size_t target = cfg.dynamic_rope ? std::max(context_len, cfg.max_seq_len)
                                              : cfg.max_seq_len;
  return make_rope_context(cfg.rope_theta, cfg.dec_head_dim(), cfg.max_seq_len, target,
                           cfg.rope_scaling == "linear" ? RopeScaling::LinearInterpolation
                                                        : RopeScaling::DynamicNtk);
}

struct ContextOverflowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Causal stack, final RMSNorm and vocabulary projection over packed
/// sequences; positions restart at 0 in every segment.
template <class T>
Tensor<T> decoder_forward(const Tensor<T>& embeddings, const std::vector<Segment>& segments,
                          const DecoderParams<T>& dec, const ModelConfig& cfg,
                          const RopeContext& ctx) {
  std::vector<std::int32_t> positions;
  positions.reserve(embeddings.dim(0));
  for (const auto& s : segments) {
    if (s.length > ctx.context_len) {
      throw ContextOverflowError("decoder: sequence of " + std::to_string(s.length) +
                                 " tokens exceeds the context of " +
                                 std::to_string(ctx.context_len) +
                                 (cfg.dynamic_rope ? "" : " (dynamic rope scaling disabled)"));
    }
    for (std::size_t i = 0; i < s.length; ++i) positions.push_back(static_cast<std::int32_t>(i));
  }
  check_segments(segments, embeddings.dim(0));
  SequenceLayout<T> layout{segments, rope_table_1d<T>(positions, ctx), true};
  Tensor<T> x = embeddings;
  for (const auto& b : dec.blocks) x = block_forward(x, b, cfg.dec_heads, layout, cfg.qk_norm_decoder);
  return matmul(rms_norm(x, dec.final_gain), dec.head);
}

}  // namespace forge
