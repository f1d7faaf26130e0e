#pragma once

// The full vision-language model: encoder, projector and decoder parameters,
// their initialization, and a named-parameter registry.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "forge/random.hpp"
#include "forge/transformer.hpp"

namespace forge {

enum class Component { Encoder, Projector, Decoder };

inline const char* to_string(Component c) {
  switch (c) {
    case Component::Encoder: return "encoder";
    case Component::Projector: return "projector";
    case Component::Decoder: return "decoder";
  }
  return "?";
}

inline Component component_from_string(const std::string& name) {
  if (name == "encoder") return Component::Encoder;
  if (name == "projector") return Component::Projector;
  if (name == "decoder") return Component::Decoder;
  throw ConfigError("unknown component \"" + name + "\"");
}

template <class T>
struct ProjectorParams {
  Tensor<T> w1;  // [d_enc x d_dec]
  Tensor<T> w2;  // [d_dec x d_dec]
};

/// Handle to one parameter tensor with its registry metadata. `decay` marks
/// matrix weights that receive weight decay.
template <class T>
struct NamedParam {
  std::string name;
  Component component;
  Tensor<T> value;
  bool decay;
};

template <class T>
class VlmModel {
 public:
  VlmModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    context_len_ = cfg_.max_seq_len;
    Rng rng(seed, "init");
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Longest decoder sequence the rotary context is currently scaled for.
  std::size_t context_len() const { return context_len_; }
  void set_context_len(std::size_t len) { context_len_ = std::max(len, cfg_.max_seq_len); }
  RopeContext decoder_rope() const { return decoder_rope_context(cfg_, context_len_); }

  EncoderParams<T> encoder;
  ProjectorParams<T> projector;
  DecoderParams<T> decoder;

  /// Calls f(name, component, tensor&, decay) for every parameter in a fixed order.
  template <class F>
  void visit(F&& f) {
    for (auto& [p, e] : encoder.patch_embed) {
      f("encoder.patch_embed." + std::to_string(p) + ".weight", Component::Encoder, e.weight, true);
      f("encoder.patch_embed." + std::to_string(p) + ".bias", Component::Encoder, e.bias, false);
    }
    f("encoder.pos_bias", Component::Encoder, encoder.pos_bias.table, false);
    visit_blocks("encoder.blocks.", Component::Encoder, encoder.blocks, f);
    f("projector.w1", Component::Projector, projector.w1, true);
    f("projector.w2", Component::Projector, projector.w2, true);
    f("decoder.embed", Component::Decoder, decoder.embed, true);
    visit_blocks("decoder.blocks.", Component::Decoder, decoder.blocks, f);
    f("decoder.final_gain", Component::Decoder, decoder.final_gain, false);
    f("decoder.head", Component::Decoder, decoder.head, true);
  }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    const_cast<VlmModel*>(this)->visit(
        [&](const std::string& name, Component c, Tensor<T>& t, bool decay) {
          out.push_back({name, c, t, decay});
        });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value.numel();
    return n;
  }

  /// Deep copy: the clone shares no storage with this model.
  VlmModel clone() const {
    VlmModel copy = *this;
    copy.visit([](const std::string&, Component, Tensor<T>& t, bool) { t = t.clone(); });
    return copy;
  }

 private:
  template <class F>
  static void visit_blocks(const std::string& prefix, Component c,
                           std::vector<BlockParams<T>>& blocks, F& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string base = prefix + std::to_string(i) + ".";
      f(base + "attn.wq", c, b.attn.wq, true);
      f(base + "attn.wk", c, b.attn.wk, true);
      f(base + "attn.wv", c, b.attn.wv, true);
      f(base + "attn.wo", c, b.attn.wo, true);
      if (b.attn.q_gain.defined()) {
        f(base + "attn.q_gain", c, b.attn.q_gain, false);
        f(base + "attn.k_gain", c, b.attn.k_gain, false);
      }
      f(base + "ffn.w1", c, b.w1, true);
      f(base + "ffn.w3", c, b.w3, true);
      f(base + "ffn.w2", c, b.w2, true);
      f(base + "norm1.gain", c, b.norm1_gain, false);
      if (b.kind == NormKind::PreLayerNorm) f(base + "norm1.bias", c, b.norm1_bias, false);
      f(base + "norm2.gain", c, b.norm2_gain, false);
      if (b.kind == NormKind::PreLayerNorm) f(base + "norm2.bias", c, b.norm2_bias, false);
    }
  }

  Tensor<T> normal(Rng& rng, Shape shape, double std_dev) {
    auto t = Tensor<T>::zeros(std::move(shape), true);
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(std_dev));
    return t;
  }

  static Tensor<T> constant(Shape shape, T value) { return Tensor<T>::full(std::move(shape), value, true); }

  std::vector<BlockParams<T>> make_blocks(Rng& rng, std::size_t layers, std::size_t pre_ln,
                                          std::size_t dim, std::size_t heads, bool qk) {
    const double std_dev = cfg_.init_std;
    const double out_std = std_dev / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(layers, 1)));
    const std::size_t ffn = cfg_.ffn_width(dim);
    std::vector<BlockParams<T>> blocks;
    for (NormKind kind : norm_schedule(layers, pre_ln)) {
      BlockParams<T> b;
      b.kind = kind;
      b.attn.wq = normal(rng, {dim, dim}, std_dev);
      b.attn.wk = normal(rng, {dim, dim}, std_dev);
      b.attn.wv = normal(rng, {dim, dim}, std_dev);
      b.attn.wo = normal(rng, {dim, dim}, out_std);
      if (qk) {
        b.attn.q_gain = constant({dim / heads}, T(1));
        b.attn.k_gain = constant({dim / heads}, T(1));
      }
      b.w1 = normal(rng, {dim, ffn}, std_dev);
      b.w3 = normal(rng, {dim, ffn}, std_dev);
      b.w2 = normal(rng, {ffn, dim}, out_std);
      b.norm1_gain = constant({dim}, T(1));
      b.norm2_gain = constant({dim}, T(1));
      if (kind == NormKind::PreLayerNorm) {
        b.norm1_bias = constant({dim}, T(0));
        b.norm2_bias = constant({dim}, T(0));
      }
      blocks.push_back(std::move(b));
    }
    return blocks;
  }

  void build(Rng& rng) {
    const double std_dev = cfg_.init_std;
    const std::size_t de = cfg_.enc_dim, dd = cfg_.dec_dim;
    for (std::size_t p : cfg_.patch_sizes) {
      encoder.patch_embed[p] = {normal(rng, {p * p * Image::channels, de}, std_dev),
                                constant({de}, T(0))};
    }
    encoder.pos_bias = {cfg_.bias_grid, cfg_.bias_grid,
                        normal(rng, {cfg_.bias_grid * cfg_.bias_grid, de}, std_dev)};
    encoder.blocks = make_blocks(rng, cfg_.enc_layers, cfg_.enc_pre_ln_count, de,
                                 cfg_.enc_heads, cfg_.qk_norm_encoder);
    projector.w1 = normal(rng, {de, dd}, std_dev);
    projector.w2 = normal(rng, {dd, dd}, std_dev);
    decoder.embed = normal(rng, {cfg_.vocab_size, dd}, std_dev);
    decoder.blocks = make_blocks(rng, cfg_.dec_layers, cfg_.dec_pre_ln_count, dd,
                                 cfg_.dec_heads, cfg_.qk_norm_decoder);
    decoder.final_gain = constant({dd}, T(1));
    decoder.head = normal(rng, {dd, cfg_.vocab_size}, std_dev);
  }

  ModelConfig cfg_;
  std::size_t context_len_ = 0;
};

}  // namespace forge
