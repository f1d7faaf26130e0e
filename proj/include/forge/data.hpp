#pragma once

// Deterministic synthetic data: an order-2 Markov text source, a procedural
// glyph-OCR image generator, and evaluation metrics.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "forge/fusion.hpp"
#include "forge/random.hpp"
#include "forge/vision.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// Seeds

enum class Split : std::uint64_t { Train = 0, Heldout = 1 };

/// Per-sample seed. The split occupies the top bit, so train and held-out
/// seeds never coincide; the run seed fills bits 40..62 and the index the rest.
inline std::uint64_t sample_seed(std::uint64_t root, Split split, std::uint64_t index) {
  return (static_cast<std::uint64_t>(split) << 63) |
         ((splitmix64(root) & 0x7FFFFFULL) << 40) | (index & ((1ULL << 40) - 1));
}

// ---------------------------------------------------------------------------
// Order-2 Markov text

/// Every context (a, b) draws its successor from a small candidate set owned
/// by b, with context-specific weights. Both tables derive from the seed.
class MarkovSource {
 public:
  static constexpr std::size_t kCandidates = 4;

  MarkovSource(std::uint64_t seed, std::size_t vocab_size) : vocab_(vocab_size) {
    if (vocab_size < 4) throw ContractError("markov source: vocab_size must be >= 4");
    Rng rng(seed, "markov-table");
    candidates_.resize(vocab_ * kCandidates);
    for (std::size_t b = 0; b < vocab_; ++b) {
      std::vector<std::int32_t> pool(vocab_);
      for (std::size_t i = 0; i < vocab_; ++i) pool[i] = static_cast<std::int32_t>(i);
      for (std::size_t i = 0; i < kCandidates; ++i) {
        const std::size_t j = i + rng.below(vocab_ - i);
        std::swap(pool[i], pool[j]);
        candidates_[b * kCandidates + i] = pool[i];
      }
    }
    cumulative_.resize(vocab_ * vocab_ * kCandidates);
    for (std::size_t ctx = 0; ctx < vocab_ * vocab_; ++ctx) {
      std::array<double, kCandidates> w{};
      double total = 0;
      for (auto& v : w) total += (v = std::exp(2.5 * rng.uniform()));
      double run = 0;
      for (std::size_t i = 0; i < kCandidates; ++i) {
        run += w[i] / total;
        cumulative_[ctx * kCandidates + i] = run;
      }
      cumulative_[ctx * kCandidates + kCandidates - 1] = 1.0;
    }
  }

  std::size_t vocab_size() const { return vocab_; }

  /// Probability of `next` following (a, b).
  double probability(std::int32_t a, std::int32_t b, std::int32_t next) const {
    const std::size_t ctx = static_cast<std::size_t>(a) * vocab_ + static_cast<std::size_t>(b);
    double prev = 0, p = 0;
    for (std::size_t i = 0; i < kCandidates; ++i) {
      const double c = cumulative_[ctx * kCandidates + i];
      if (candidates_[b * kCandidates + i] == next) p += c - prev;
      prev = c;
    }
    return p;
  }

  std::vector<std::int32_t> sample(std::uint64_t seed, std::size_t n_tokens) const {
    Rng rng(seed, "markov-path");
    std::vector<std::int32_t> out;
    out.reserve(n_tokens);
    for (std::size_t i = 0; i < n_tokens; ++i) {
      if (i < 2) {
        out.push_back(static_cast<std::int32_t>(rng.below(vocab_)));
        continue;
      }
      const std::size_t a = static_cast<std::size_t>(out[i - 2]);
      const std::size_t b = static_cast<std::size_t>(out[i - 1]);
      const double u = rng.uniform();
      const double* cum = &cumulative_[(a * vocab_ + b) * kCandidates];
      std::size_t k = 0;
      while (k + 1 < kCandidates && u >= cum[k]) ++k;
      out.push_back(candidates_[b * kCandidates + k]);
    }
    return out;
  }

  /// Entropy rate of the source in nats, averaged uniformly over contexts.
  double mean_context_entropy() const {
    double total = 0;
    for (std::size_t ctx = 0; ctx < vocab_ * vocab_; ++ctx) {
      double prev = 0;
      for (std::size_t i = 0; i < kCandidates; ++i) {
        const double p = cumulative_[ctx * kCandidates + i] - prev;
        prev = cumulative_[ctx * kCandidates + i];
        if (p > 0) total -= p * std::log(p);
      }
    }
    return total / static_cast<double>(vocab_ * vocab_);
  }

 private:
  std::size_t vocab_;
  std::vector<std::int32_t> candidates_;
  std::vector<double> cumulative_;
};

/// Token stream in [0, vocab_size) from the Markov source seeded by `seed`.
inline std::vector<std::int32_t> gen_text_corpus(std::uint64_t seed, std::size_t n_tokens,
                                                 std::size_t vocab_size) {
  return MarkovSource(seed, vocab_size).sample(seed, n_tokens);
}

// ---------------------------------------------------------------------------
// Glyph OCR

/// 8x8 bitmaps for the symbols 0-9 and A-F; bit 7 is the leftmost pixel.
inline constexpr std::array<std::array<std::uint8_t, 8>, 16> kGlyphFont{{
    {0x3C, 0x66, 0x6E, 0x76, 0x66, 0x66, 0x3C, 0x00},  // 0
    {0x18, 0x38, 0x18, 0x18, 0x18, 0x18, 0x7E, 0x00},  // 1
    {0x3C, 0x66, 0x06, 0x0C, 0x30, 0x60, 0x7E, 0x00},  // 2
    {0x3C, 0x66, 0x06, 0x1C, 0x06, 0x66, 0x3C, 0x00},  // 3
    {0x0C, 0x1C, 0x3C, 0x6C, 0x7E, 0x0C, 0x0C, 0x00},  // 4
    {0x7E, 0x60, 0x7C, 0x06, 0x06, 0x66, 0x3C, 0x00},  // 5
    {0x3C, 0x60, 0x7C, 0x66, 0x66, 0x66, 0x3C, 0x00},  // 6
    {0x7E, 0x06, 0x0C, 0x18, 0x30, 0x30, 0x30, 0x00},  // 7
    {0x3C, 0x66, 0x66, 0x3C, 0x66, 0x66, 0x3C, 0x00},  // 8
    {0x3C, 0x66, 0x66, 0x3E, 0x06, 0x0C, 0x38, 0x00},  // 9
    {0x18, 0x3C, 0x66, 0x66, 0x7E, 0x66, 0x66, 0x00},  // A
    {0x7C, 0x66, 0x66, 0x7C, 0x66, 0x66, 0x7C, 0x00},  // B
    {0x3C, 0x66, 0x60, 0x60, 0x60, 0x66, 0x3C, 0x00},  // C
    {0x78, 0x6C, 0x66, 0x66, 0x66, 0x6C, 0x78, 0x00},  // D
    {0x7E, 0x60, 0x60, 0x7C, 0x60, 0x60, 0x7E, 0x00},  // E
    {0x7E, 0x60, 0x60, 0x7C, 0x60, 0x60, 0x60, 0x00},  // F
}};

inline constexpr char kGlyphChars[] = "0123456789ABCDEF";

struct GlyphParams {
  std::size_t image_size = 448;
  std::size_t n_glyphs = 3;
  std::size_t glyph_set_size = 16;
  std::size_t per_line = 4;    // glyphs per text line before wrapping
  std::size_t min_scale = 2;   // glyph edge = 8 * scale pixels
  std::size_t max_scale = 0;   // 0: largest scale that fits a cell
  std::size_t jitter = 0;      // 0: anywhere in the cell; else max shift from the cell centre
  std::uint8_t background = 235;
  std::uint8_t max_ink = 90;   // ink channels drawn from [0, max_ink]

  bool operator==(const GlyphParams&) const = default;
};

struct GlyphSample {
  Image image;
  std::vector<std::int32_t> caption_ids;  // glyph indices in reading order
  std::uint64_t seed = 0;
};

struct LayoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Renders glyphs in reading order: one cell per glyph, `per_line` cells per
/// row, each glyph at a random scale and offset inside its cell.
inline GlyphSample gen_glyph_sample(std::uint64_t seed, const GlyphParams& params) {
  if (params.n_glyphs < 1) throw ContractError("gen_glyph_sample: n_glyphs must be >= 1");
  if (params.glyph_set_size < 1 || params.glyph_set_size > kGlyphFont.size()) {
    throw ContractError("gen_glyph_sample: glyph_set_size must be in [1, 16]");
  }
  const std::size_t per_line = std::max<std::size_t>(1, std::min(params.per_line, params.n_glyphs));
  const std::size_t lines = (params.n_glyphs + per_line - 1) / per_line;
  const std::size_t cell_w = params.image_size / per_line;
  const std::size_t cell_h = params.image_size / lines;
  const std::size_t fit = std::min(cell_w, cell_h) / 8;
  const std::size_t max_scale = params.max_scale ? std::min(params.max_scale, fit) : fit;
  if (params.min_scale < 1 || max_scale < params.min_scale) {
    throw LayoutError("gen_glyph_sample: " + std::to_string(params.n_glyphs) +
                      " glyphs at scale >= " + std::to_string(params.min_scale) +
                      " do not fit a " + std::to_string(params.image_size) + "px canvas");
  }
  // Offset of a glyph inside a cell with `slack` free pixels.
  auto place = [&](Rng& r, std::size_t slack) {
    if (params.jitter == 0 || 2 * params.jitter >= slack) return r.below(slack + 1);
    return slack / 2 - params.jitter + r.below(2 * params.jitter + 1);
  };
  Rng rng(seed, "glyph");
  GlyphSample s;
  s.seed = seed;
  s.image = Image(params.image_size, params.image_size, params.background);
  for (std::size_t g = 0; g < params.n_glyphs; ++g) {
    const auto id = static_cast<std::int32_t>(rng.below(params.glyph_set_size));
    s.caption_ids.push_back(id);
    const std::size_t scale = params.min_scale + rng.below(max_scale - params.min_scale + 1);
    const std::size_t edge = 8 * scale;
    const std::size_t x0 = (g % per_line) * cell_w + place(rng, cell_w - edge);
    const std::size_t y0 = (g / per_line) * cell_h + place(rng, cell_h - edge);
    std::array<std::uint8_t, 3> ink{};
    for (auto& c : ink) c = static_cast<std::uint8_t>(rng.below(params.max_ink + 1u));
    const auto& bitmap = kGlyphFont[static_cast<std::size_t>(id)];
    for (std::size_t y = 0; y < edge; ++y)
      for (std::size_t x = 0; x < edge; ++x) {
        if (!((bitmap[y / scale] >> (7 - x / scale)) & 1)) continue;
        for (std::size_t c = 0; c < 3; ++c) s.image.at(y0 + y, x0 + x, c) = ink[c];
      }
  }
  return s;
}

inline std::string caption_text(const std::vector<std::int32_t>& glyph_ids) {
  std::string out;
  for (auto id : glyph_ids) out.push_back(kGlyphChars[id]);
  return out;
}

/// Writes `count` samples as PPM files plus `manifest.tsv` ("<file>\t<caption>").
inline void write_glyph_dataset(const std::filesystem::path& dir, std::uint64_t root_seed,
                                Split split, std::size_t count, const GlyphParams& params) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.tsv", std::ios::binary);
  for (std::size_t i = 0; i < count; ++i) {
    const auto sample = gen_glyph_sample(sample_seed(root_seed, split, i), params);
    char name[32];
    std::snprintf(name, sizeof name, "glyph_%05zu.ppm", i);
    save_ppm(sample.image, dir / name);
    manifest << name << '\t' << caption_text(sample.caption_ids) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Metrics

inline int exact_match(const std::vector<std::int32_t>& predicted,
                       const std::vector<std::int32_t>& target) {
  return predicted == target ? 1 : 0;
}

inline double corpus_accuracy(
    const std::vector<std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>>>& pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& [p, t] : pairs) hits += static_cast<std::size_t>(exact_match(p, t));
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

/// exp(mean NLL) of a token stream, scored in windows of [BOS] + up to
/// window - 1 tokens.
template <class T>
double perplexity(const VlmModel<T>& model, const std::vector<std::int32_t>& tokens,
                  std::size_t window) {
  if (tokens.empty()) throw ContractError("perplexity: empty token stream");
  if (window < 2) throw ContractError("perplexity: window must hold BOS and a token");
  double nll = 0;
  for (std::size_t start = 0; start < tokens.size(); start += window - 1) {
    const std::size_t len = std::min(window - 1, tokens.size() - start);
    Example ex;
    ex.response.assign(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                       tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
    const auto out = vlm_forward(model, std::vector<Example>{ex});
    nll += static_cast<double>(out.loss.item()) * static_cast<double>(len);
  }
  return std::exp(nll / static_cast<double>(tokens.size()));
}

}  // namespace forge
