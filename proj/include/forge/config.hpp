#pragma once

// Model hyperparameters, named presets and closed-form parameter counts.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "forge/random.hpp"
#include "json.hpp"

namespace forge {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class NormKind { PreLayerNorm, PostRMSNorm };

inline const char* to_string(NormKind kind) {
  return kind == NormKind::PreLayerNorm ? "PreLayerNorm" : "PostRMSNorm";
}

/// First `pre_ln_count` layers use Pre-LayerNorm wiring, the rest Post-RMSNorm.
inline std::vector<NormKind> norm_schedule(std::size_t total_layers, std::size_t pre_ln_count) {
  if (pre_ln_count > total_layers) {
    throw ConfigError("norm_schedule: pre_ln_count " + std::to_string(pre_ln_count) +
                      " exceeds " + std::to_string(total_layers) + " layers");
  }
  std::vector<NormKind> kinds(total_layers, NormKind::PostRMSNorm);
  std::fill_n(kinds.begin(), pre_ln_count, NormKind::PreLayerNorm);
  return kinds;
}

inline const std::vector<std::size_t>& default_patch_sizes() {
  static const std::vector<std::size_t> sizes{14, 16, 20, 24, 28, 32};
  return sizes;
}

struct ModelConfig {
  std::string name = "custom";

  std::size_t enc_layers = 0, enc_dim = 0, enc_heads = 0, enc_pre_ln_count = 0;
  std::size_t dec_layers = 0, dec_dim = 0, dec_heads = 0, dec_pre_ln_count = 0;

  double ffn_multiplier = 8.0 / 3.0;
  std::size_t ffn_hidden = 0;  // explicit override; 0 derives it from the multiplier

  std::size_t max_seq_len = 0;  // length the decoder is trained at
  double rope_theta = 10000.0;
  std::string rope_scaling = "ntk";  // or "linear"
  bool dynamic_rope = true;
  std::size_t vocab_size = 0;

  std::size_t image_size = 448;
  std::size_t patch_budget = 1024;
  std::vector<std::size_t> patch_sizes = default_patch_sizes();
  std::size_t bias_grid = 32;  // trained extent of the absolute-bias grid

  bool qk_norm_encoder = true;
  bool qk_norm_decoder = true;
  double init_std = 0.02;

  std::size_t enc_head_dim() const { return enc_heads ? enc_dim / enc_heads : 0; }
  std::size_t dec_head_dim() const { return dec_heads ? dec_dim / dec_heads : 0; }

  /// SwiGLU hidden width for a given model width, rounded up to a multiple of 8.
  std::size_t ffn_width(std::size_t dim) const {
    if (ffn_hidden) return ffn_hidden;
    const auto raw = static_cast<std::size_t>(std::ceil(ffn_multiplier * dim - 1e-9));
    return (raw + 7) / 8 * 8;
  }

  void validate() const {
    auto check = [](bool ok, const std::string& key, const std::string& why) {
      if (!ok) throw ConfigError(key + ": " + why);
    };
    check(enc_pre_ln_count <= enc_layers, "enc_pre_ln_count", "exceeds enc_layers");
    check(dec_pre_ln_count <= dec_layers, "dec_pre_ln_count", "exceeds dec_layers");
    check(enc_heads > 0 && enc_dim % enc_heads == 0, "enc_heads", "must divide enc_dim");
    check(dec_heads > 0 && dec_dim % dec_heads == 0, "dec_heads", "must divide dec_dim");
    check(enc_head_dim() % 4 == 0 && enc_head_dim() > 0, "enc_heads",
          "encoder head_dim must be a positive multiple of 4");
    check(dec_head_dim() % 4 == 0 && dec_head_dim() > 2, "dec_heads",
          "decoder head_dim must be a positive multiple of 4");
    check(vocab_size >= 4, "vocab_size", "must be at least 4");
    check(max_seq_len >= 1, "max_seq_len", "must be positive");
    check(rope_theta > 0, "rope_theta", "must be positive");
    check(rope_scaling == "ntk" || rope_scaling == "linear", "rope_scaling",
          "must be \"ntk\" or \"linear\"");
    check(!patch_sizes.empty(), "patch_sizes", "must not be empty");
    check(patch_budget >= 1, "patch_budget", "must be positive");
    check(bias_grid >= 1, "bias_grid", "must be positive");
    check(image_size >= 1, "image_size", "must be positive");
    check(init_std > 0, "init_std", "must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, name, enc_layers, enc_dim, enc_heads,
                                   enc_pre_ln_count, dec_layers, dec_dim, dec_heads,
                                   dec_pre_ln_count, ffn_multiplier, ffn_hidden, max_seq_len,
                                   rope_theta, rope_scaling, dynamic_rope, vocab_size,
                                   image_size, patch_budget, patch_sizes, bias_grid,
                                   qk_norm_encoder, qk_norm_decoder, init_std)

/// Stable digest of a configuration's canonical JSON form.
inline std::uint64_t config_digest(const ModelConfig& cfg) {
  return fnv1a64(nlohmann::json(cfg).dump());
}

/// Named presets. The full-size decoders are nominal: only the encoder
/// extents, context length and rotary base are fixed for "1b" and "4b".
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "1b" || name == "shakti-1b-encoder") {
    c.name = "1b";
    c.enc_layers = 36, c.enc_dim = 1536, c.enc_heads = 16, c.enc_pre_ln_count = 12;
    c.dec_layers = 24, c.dec_dim = 1024, c.dec_heads = 16, c.dec_pre_ln_count = 8;
    c.max_seq_len = 16384, c.rope_theta = 125000.0, c.vocab_size = 32000;
  } else if (name == "4b" || name == "shakti-4b-encoder") {
    c.name = "4b";
    c.enc_layers = 48, c.enc_dim = 1920, c.enc_heads = 24, c.enc_pre_ln_count = 18;
    c.dec_layers = 32, c.dec_dim = 2560, c.dec_heads = 20, c.dec_pre_ln_count = 11;
    c.max_seq_len = 32768, c.rope_theta = 500000.0, c.vocab_size = 32000;
  } else if (name == "toy") {
    c.name = "toy";
    c.enc_layers = 4, c.enc_dim = 128, c.enc_heads = 4, c.enc_pre_ln_count = 2;
    c.dec_layers = 4, c.dec_dim = 128, c.dec_heads = 4, c.dec_pre_ln_count = 2;
    c.max_seq_len = 64, c.rope_theta = 10000.0, c.vocab_size = 32;
    c.image_size = 48, c.patch_budget = 9, c.bias_grid = 3;
  } else if (name == "micro") {
    c.name = "micro";
    c.enc_layers = 1, c.enc_dim = 8, c.enc_heads = 2, c.enc_pre_ln_count = 1;
    c.dec_layers = 1, c.dec_dim = 8, c.dec_heads = 2, c.dec_pre_ln_count = 0;
    c.ffn_hidden = 16;
    c.max_seq_len = 32, c.rope_theta = 10000.0, c.vocab_size = 12;
    c.image_size = 16, c.patch_budget = 4, c.patch_sizes = {14}, c.bias_grid = 2;
  } else {
    throw ConfigError("model: unknown preset \"" + name + "\"");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Closed-form parameter counts

/// One transformer block: attention projections, optional QK gains, SwiGLU
/// weights and the norm parameters its wiring uses.
inline std::size_t block_param_count(std::size_t dim, std::size_t heads, std::size_t ffn,
                                     NormKind kind, bool qk_norm) {
  const std::size_t head_dim = heads ? dim / heads : 0;
  const std::size_t attn = 4 * dim * dim + (qk_norm ? 2 * head_dim : 0);
  const std::size_t mlp = 3 * dim * ffn;
  const std::size_t norms = kind == NormKind::PreLayerNorm ? 4 * dim : 2 * dim;
  return attn + mlp + norms;
}

inline std::size_t encoder_param_count(const ModelConfig& c) {
  std::size_t total = 0;
  for (std::size_t p : c.patch_sizes) total += p * p * 3 * c.enc_dim + c.enc_dim;
  total += c.bias_grid * c.bias_grid * c.enc_dim;
  for (NormKind kind : norm_schedule(c.enc_layers, c.enc_pre_ln_count)) {
    total += block_param_count(c.enc_dim, c.enc_heads, c.ffn_width(c.enc_dim), kind,
                               c.qk_norm_encoder);
  }
  return total;
}

inline std::size_t projector_param_count(const ModelConfig& c) {
  return c.enc_dim * c.dec_dim + c.dec_dim * c.dec_dim;
}

inline std::size_t decoder_param_count(const ModelConfig& c) {
  std::size_t total = 2 * c.vocab_size * c.dec_dim + c.dec_dim;  // embed, head, final norm
  for (NormKind kind : norm_schedule(c.dec_layers, c.dec_pre_ln_count)) {
    total += block_param_count(c.dec_dim, c.dec_heads, c.ffn_width(c.dec_dim), kind,
                               c.qk_norm_decoder);
  }
  return total;
}

inline std::size_t param_count(const ModelConfig& c) {
  return encoder_param_count(c) + projector_param_count(c) + decoder_param_count(c);
}

}  // namespace forge
