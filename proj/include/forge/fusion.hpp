#pragma once

// Visual projection, fusion of visual tokens with text embeddings, and the
// end-to-end forward pass over a batch of examples.

#include <cstdint>
#include <optional>
#include <vector>

#include "forge/model.hpp"

namespace forge {

/// Reserved token ids shared by every vocabulary.
struct SpecialTokens {
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t bos = 1;
  static constexpr std::int32_t eos = 2;
  static constexpr std::int32_t count = 3;
};

/// silu(features . P1) . P2
template <class T>
Tensor<T> project_visual(const Tensor<T>& features, const Tensor<T>& p1, const Tensor<T>& p2) {
  return matmul(silu(matmul(features, p1)), p2);
}

/// Decoder input for one example: [BOS][visual tokens][prompt][response].
struct FusedLayout {
  std::size_t visual_begin = 1, visual_end = 1;
  /// Token id at each position, -1 for visual positions.
  std::vector<std::int32_t> ids;
  /// True where the position holds a response token the model must predict.
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::int32_t> positions;

  std::size_t length() const { return ids.size(); }
};

template <class T>
struct FusedSequence {
  Tensor<T> embeddings;  // [T_total x d_dec]
  FusedLayout layout;
};

inline FusedLayout fuse_layout(std::size_t visual_len, std::span<const std::int32_t> prompt,
                               std::span<const std::int32_t> response, std::size_t context_len) {
  FusedLayout l;
  const std::size_t total = 1 + visual_len + prompt.size() + response.size();
  if (total > context_len) {
    throw ContractError("fuse_sequence: " + std::to_string(total) +
                        " tokens exceed the decoder context of " + std::to_string(context_len));
  }
  l.visual_begin = 1;
  l.visual_end = 1 + visual_len;
  l.ids.push_back(SpecialTokens::bos);
  l.ids.insert(l.ids.end(), visual_len, -1);
  l.ids.insert(l.ids.end(), prompt.begin(), prompt.end());
  l.ids.insert(l.ids.end(), response.begin(), response.end());
  l.loss_mask.assign(total, 0);
  std::fill(l.loss_mask.end() - static_cast<std::ptrdiff_t>(response.size()), l.loss_mask.end(), 1);
  for (std::size_t i = 0; i < total; ++i) l.positions.push_back(static_cast<std::int32_t>(i));
  return l;
}

/// Concatenates BOS, the visual tokens and the embedded text. An undefined or
/// empty `visual` tensor gives a text-only sequence.
template <class T>
FusedSequence<T> fuse_sequence(const Tensor<T>& visual, std::span<const std::int32_t> prompt,
                               std::span<const std::int32_t> response, const Tensor<T>& embed_table,
                               std::size_t context_len) {
  const std::size_t n_visual = visual.defined() ? visual.dim(0) : 0;
  FusedSequence<T> seq;
  seq.layout = fuse_layout(n_visual, prompt, response, context_len);
  std::vector<std::int32_t> text{SpecialTokens::bos};
  text.insert(text.end(), prompt.begin(), prompt.end());
  text.insert(text.end(), response.begin(), response.end());
  auto embedded = embedding(embed_table, std::span<const std::int32_t>(text));
  if (n_visual == 0) {
    seq.embeddings = embedded;
  } else {
    seq.embeddings = concat<T>({slice(embedded, 0, 0, 1), visual,
                                slice(embedded, 0, 1, text.size() - 1)});
  }
  return seq;
}

struct Example {
  std::optional<Image> image;
  std::vector<std::int32_t> prompt;
  std::vector<std::int32_t> response;

  std::size_t target_count() const { return response.size(); }
};

/// Visual tokens for a batch of images, one tensor per image.
template <class T>
std::vector<Tensor<T>> encode_images(const VlmModel<T>& model,
                                     const std::vector<const Image*>& images) {
  if (images.empty()) return {};
  const auto& cfg = model.config();
  std::vector<Tensor<T>> tokens;
  std::vector<std::int32_t> rows, cols;
  std::vector<Segment> segments;
  std::size_t offset = 0;
  for (const Image* img : images) {
    const PatchPlan plan = plan_patches(img->height, img->width, cfg.patch_budget, cfg.patch_sizes);
    const Image sized = resize_image(*img, plan.resized_h, plan.resized_w);
    auto embedded = embed_patches(patchify<T>(sized, plan), model.encoder.patch_embed, plan,
                                  model.encoder.pos_bias);
    tokens.push_back(embedded.tokens);
    rows.insert(rows.end(), embedded.rows.begin(), embedded.rows.end());
    cols.insert(cols.end(), embedded.cols.begin(), embedded.cols.end());
    segments.push_back({offset, plan.token_count()});
    offset += plan.token_count();
  }
  auto packed = tokens.size() == 1 ? tokens.front() : concat(tokens);
  auto features = encoder_forward(packed, std::span<const std::int32_t>(rows),
                                  std::span<const std::int32_t>(cols), segments, model.encoder, cfg);
  auto visual = project_visual(features, model.projector.w1, model.projector.w2);
  if (segments.size() == 1) return {visual};
  std::vector<Tensor<T>> out;
  for (const auto& s : segments) out.push_back(slice(visual, 0, s.start, s.length));
  return out;
}

template <class T>
struct BatchOutput {
  Tensor<T> logits;  // [sum of sequence lengths x V]
  Tensor<T> loss;    // mean next-token NLL over response positions
  std::vector<FusedLayout> layouts;
  std::vector<Segment> segments;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> target_mask;
};

/// Next-token targets: row i predicts the token at i + 1 wherever that
/// position is a response token.
inline void shifted_targets(const std::vector<FusedLayout>& layouts,
                            std::vector<std::int32_t>& targets, std::vector<std::uint8_t>& mask) {
  targets.clear();
  mask.clear();
  for (const auto& l : layouts) {
    for (std::size_t i = 0; i < l.length(); ++i) {
      const bool has_next = i + 1 < l.length();
      targets.push_back(has_next ? std::max(l.ids[i + 1], 0) : 0);
      mask.push_back(has_next ? l.loss_mask[i + 1] : 0);
    }
  }
}

/// plan -> patchify -> encode -> project -> fuse -> decode -> cross-entropy.
template <class T>
BatchOutput<T> vlm_forward(const VlmModel<T>& model, const std::vector<Example>& batch,
                           bool compute_loss = true) {
  std::vector<const Image*> images;
  for (const auto& ex : batch) {
    if (ex.image) images.push_back(&*ex.image);
  }
  const auto visual = encode_images(model, images);
  const RopeContext rope = model.decoder_rope();

  BatchOutput<T> out;
  std::vector<Tensor<T>> embeddings;
  std::size_t next_image = 0, offset = 0;
  for (const auto& ex : batch) {
    const Tensor<T> vis = ex.image ? visual[next_image++] : Tensor<T>();
    auto fused = fuse_sequence(vis, std::span<const std::int32_t>(ex.prompt),
                               std::span<const std::int32_t>(ex.response), model.decoder.embed,
                               rope.context_len);
    out.segments.push_back({offset, fused.layout.length()});
    offset += fused.layout.length();
    embeddings.push_back(fused.embeddings);
    out.layouts.push_back(std::move(fused.layout));
  }
  auto packed = embeddings.size() == 1 ? embeddings.front() : concat(embeddings);
  out.logits = decoder_forward(packed, out.segments, model.decoder, model.config(), rope);
  shifted_targets(out.layouts, out.targets, out.target_mask);
  if (compute_loss) {
    out.loss = cross_entropy(out.logits, std::span<const std::int32_t>(out.targets),
                             std::span<const std::uint8_t>(out.target_mask));
  }
  return out;
}

/// Single-example convenience form returning (logits, loss).
template <class T>
std::pair<Tensor<T>, Tensor<T>> vlm_forward(const VlmModel<T>& model, const Image* image,
                                            std::vector<std::int32_t> prompt,
                                            std::vector<std::int32_t> response) {
  Example ex;
  if (image) ex.image = *image;
  ex.prompt = std::move(prompt);
  ex.response = std::move(response);
  auto out = vlm_forward(model, std::vector<Example>{std::move(ex)});
  return {out.logits, out.loss};
}

/// Sum of log-probabilities of each example's response under the model.
template <class T>
std::vector<Tensor<T>> response_logprobs(const VlmModel<T>& model, const std::vector<Example>& batch) {
  auto out = vlm_forward(model, batch, false);
  std::vector<Tensor<T>> result;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& seg = out.segments[k];
    auto logits = slice(out.logits, 0, seg.start, seg.length);
    std::span<const std::int32_t> t(out.targets.data() + seg.start, seg.length);
    std::span<const std::uint8_t> m(out.target_mask.data() + seg.start, seg.length);
    result.push_back(scale(cross_entropy(logits, t, m, Reduction::Sum), T(-1)));
  }
  return result;
}

/// Greedy decoding after [BOS][visual][prompt] until EOS or `max_new` tokens.
/// The generated ids exclude EOS.
template <class T>
std::vector<std::int32_t> greedy_decode(const VlmModel<T>& model, const Example& prompt_only,
                                        std::size_t max_new) {
  Example ex = prompt_only;
  ex.response.clear();
  std::optional<Tensor<T>> visual;
  if (ex.image) visual = encode_images(model, {&*ex.image}).front();
  const RopeContext rope = model.decoder_rope();
  std::vector<std::int32_t> generated;
  for (std::size_t step = 0; step < max_new; ++step) {
    auto fused = fuse_sequence(visual ? *visual : Tensor<T>(), std::span<const std::int32_t>(ex.prompt),
                               std::span<const std::int32_t>(generated), model.decoder.embed,
                               rope.context_len);
    const std::size_t len = fused.layout.length();
    auto logits = decoder_forward(fused.embeddings, {{0, len}}, model.decoder, model.config(), rope);
    const std::size_t vocab = logits.dim(1);
    auto row = logits.data().subspan((len - 1) * vocab, vocab);
    const auto next = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == SpecialTokens::eos) break;
    generated.push_back(next);
  }
  return generated;
}

}  // namespace forge
