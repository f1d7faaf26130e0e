#pragma once

// Stage training loop, data streams, the preference objective and the
// metrics log.

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "forge/checkpoint.hpp"
#include "forge/data.hpp"
#include "forge/stage.hpp"

namespace forge {

/// One micro-batch. `rejected` is either empty or holds one dispreferred
/// response per example (used by the preference objective).
struct MicroBatch {
  std::vector<Example> examples;
  std::vector<std::vector<std::int32_t>> rejected;

  std::size_t target_count() const {
    std::size_t n = 0;
    for (const auto& e : examples) n += e.target_count();
    return n;
  }
};

class DataStream {
 public:
  virtual ~DataStream() = default;
  /// The next micro-batch, or nothing once the stream is exhausted.
  virtual std::optional<MicroBatch> next() = 0;
};

/// A finite, pre-built sequence of micro-batches.
class VectorStream : public DataStream {
 public:
  explicit VectorStream(std::vector<MicroBatch> batches) : batches_(std::move(batches)) {}
  std::optional<MicroBatch> next() override {
    if (pos_ == batches_.size()) return std::nullopt;
    return batches_[pos_++];
  }

 private:
  std::vector<MicroBatch> batches_;
  std::size_t pos_ = 0;
};

/// Text tokens from the Markov source live above the special ids.
inline std::int32_t text_token(std::int32_t raw) { return raw + SpecialTokens::count; }

inline MarkovSource corpus_source(std::uint64_t root_seed, std::size_t vocab_size) {
  return MarkovSource(stream_seed(root_seed, "corpus"), vocab_size - SpecialTokens::count);
}

/// Text-only examples of `seq_len` decoder positions ([BOS] + seq_len - 1 tokens).
inline Example markov_example(const MarkovSource& source, std::uint64_t seed, std::size_t seq_len) {
  Example ex;
  for (auto t : source.sample(seed, seq_len - 1)) ex.response.push_back(text_token(t));
  return ex;
}

/// Endless stream of Markov text micro-batches.
class MarkovStream : public DataStream {
 public:
  MarkovStream(std::uint64_t root_seed, std::size_t vocab_size, std::size_t seq_len,
               std::size_t micro_batch, Split split = Split::Train)
      : source_(corpus_source(root_seed, vocab_size)),
        root_(root_seed),
        seq_len_(seq_len),
        micro_batch_(micro_batch),
        split_(split) {}

  std::optional<MicroBatch> next() override {
    MicroBatch mb;
    for (std::size_t i = 0; i < micro_batch_; ++i) {
      mb.examples.push_back(markov_example(source_, sample_seed(root_, split_, index_++), seq_len_));
    }
    return mb;
  }

 private:
  MarkovSource source_;
  std::uint64_t root_;
  std::size_t seq_len_, micro_batch_;
  Split split_;
  std::uint64_t index_ = 0;
};

/// OCR example: the image, an empty prompt, and the caption followed by EOS.
inline Example glyph_example(const GlyphSample& s) {
  Example ex;
  ex.image = s.image;
  for (auto id : s.caption_ids) ex.response.push_back(text_token(id));
  ex.response.push_back(SpecialTokens::eos);
  return ex;
}

inline std::uint64_t glyph_seed(std::uint64_t root_seed, const std::string& stream, Split split,
                                std::uint64_t index) {
  return sample_seed(stream_seed(root_seed, stream), split, index);
}

/// Endless stream of glyph OCR micro-batches. With `preferences`, each example
/// also carries a rejected caption differing in one glyph.
class GlyphStream : public DataStream {
 public:
  GlyphStream(std::uint64_t root_seed, std::string name, GlyphParams params,
              std::size_t micro_batch, bool preferences = false)
      : root_(root_seed),
        name_(std::move(name)),
        params_(params),
        micro_batch_(micro_batch),
        preferences_(preferences) {}

  std::optional<MicroBatch> next() override {
    MicroBatch mb;
    for (std::size_t i = 0; i < micro_batch_; ++i) {
      const auto sample = gen_glyph_sample(glyph_seed(root_, name_, Split::Train, index_++), params_);
      mb.examples.push_back(glyph_example(sample));
      if (preferences_) {
        Rng rng(sample.seed, "rejected");
        auto bad = mb.examples.back().response;
        const std::size_t k = rng.below(sample.caption_ids.size());
        const auto shift = static_cast<std::int32_t>(1 + rng.below(params_.glyph_set_size - 1));
        const auto g = (sample.caption_ids[k] + shift) % static_cast<std::int32_t>(params_.glyph_set_size);
        bad[k] = text_token(g);
        mb.rejected.push_back(std::move(bad));
      }
    }
    return mb;
  }

 private:
  std::uint64_t root_;
  std::string name_;
  GlyphParams params_;
  std::size_t micro_batch_;
  bool preferences_;
  std::uint64_t index_ = 0;
};

// ---------------------------------------------------------------------------
// Preference objective

/// -log sigmoid(beta * ((pc - pr) - (rc - rr))), averaged over pairs.
template <class T>
Tensor<T> dpo_loss(const Tensor<T>& policy_chosen, const Tensor<T>& policy_rejected,
                   const Tensor<T>& ref_chosen, const Tensor<T>& ref_rejected, double beta) {
  if (!(beta > 0)) throw ContractError("dpo_loss: beta must be positive");
  auto margin = sub(sub(policy_chosen, policy_rejected), sub(ref_chosen, ref_rejected));
  return mean(softplus(scale(margin, static_cast<T>(-beta))));
}

inline double dpo_loss(double pc, double pr, double rc, double rr, double beta) {
  if (!(beta > 0)) throw ContractError("dpo_loss: beta must be positive");
  const double z = -beta * ((pc - pr) - (rc - rr));
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

// ---------------------------------------------------------------------------
// Loop

struct StepMetrics {
  std::size_t step = 0;  // 1-based optimizer step
  int stage = 0;
  double lr = 0;
  double loss = 0;
  std::size_t tokens_seen = 0;  // cumulative decoder positions processed
};

struct NumericAbort : std::runtime_error {
  NumericAbort(std::size_t step_, double lr_, double grad_norm)
      : std::runtime_error("non-finite loss at step " + std::to_string(step_) + " (lr " +
                           std::to_string(lr_) + ", max grad norm " + std::to_string(grad_norm) + ")"),
        step(step_),
        lr(lr_),
        max_grad_norm(grad_norm) {}
  std::size_t step;
  double lr;
  double max_grad_norm;
};

template <class T>
struct StageHooks {
  std::function<void(const StepMetrics&)> on_step;
  /// Called every `checkpoint_every` steps and once after the final step.
  std::function<void(const VlmModel<T>&, const AdamW<T>&, std::size_t step)> on_checkpoint;
  std::function<void(const std::string&)> log;
};

struct StageResult {
  std::vector<StepMetrics> metrics;
  std::size_t optimizer_steps = 0;
  std::size_t micro_batches = 0;
  std::size_t dropped_micro_batches = 0;
};

namespace detail {

template <class T>
Tensor<T> micro_batch_loss(const VlmModel<T>& model, const VlmModel<T>* reference,
                           const MicroBatch& mb, const StageConfig& cfg, std::size_t& positions) {
  auto out = vlm_forward(model, mb.examples);
  for (const auto& l : out.layouts) positions += l.length();
  if (objective_from_string(cfg.objective) == Objective::Lm || mb.rejected.empty()) return out.loss;

  std::vector<Example> rejected = mb.examples;
  for (std::size_t k = 0; k < rejected.size(); ++k) rejected[k].response = mb.rejected[k];
  auto stack = [](const std::vector<Tensor<T>>& xs) {
    std::vector<Tensor<T>> rows;
    for (const auto& x : xs) rows.push_back(reshape(x, {1}));
    return concat(rows);
  };
  auto pc = stack(response_logprobs(model, mb.examples));
  auto pr = stack(response_logprobs(model, rejected));
  auto rc = stack(response_logprobs(*reference, mb.examples));
  auto rr = stack(response_logprobs(*reference, rejected));
  auto pref = dpo_loss(pc, pr, rc, rr, cfg.dpo_beta);
  return add(out.loss, scale(pref, static_cast<T>(cfg.dpo_weight)));
}

}  // namespace detail

/// Trains `model` for one stage. Each optimizer step consumes `grad_accum`
/// micro-batches; micro-batch losses are weighted by their share of the
/// step's target tokens, so the accumulated gradient equals the gradient of
/// the mean loss over the combined batch.
template <class T>
StageResult run_stage(VlmModel<T>& model, const StageConfig& cfg, DataStream& stream,
                      const StageHooks<T>& hooks = {}) {
  cfg.validate();
  model.set_context_len(cfg.max_seq_len);
  const auto trainable = apply_freeze(model, cfg.freeze);
  AdamW<T> opt(trainable, AdamWConfig{.weight_decay = cfg.weight_decay});

  std::optional<VlmModel<T>> reference;
  if (objective_from_string(cfg.objective) == Objective::LmDpo) {
    reference.emplace(model.clone());
    for (auto& p : reference->parameters()) p.value.set_requires_grad(false);
  }

  StageResult result;
  std::size_t tokens_seen = 0;
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    std::vector<MicroBatch> group;
    while (group.size() < cfg.grad_accum) {
      auto mb = stream.next();
      if (!mb) break;
      group.push_back(std::move(*mb));
    }
    result.micro_batches += group.size();
    if (group.size() < cfg.grad_accum) {
      if (step == 1 && group.empty()) throw ContractError("run_stage: data stream is empty");
      result.dropped_micro_batches = group.size();
      if (hooks.log && !group.empty()) {
        hooks.log("stage " + std::to_string(cfg.stage) + ": dropped " + std::to_string(group.size()) +
                  " trailing micro-batch(es) short of grad_accum=" + std::to_string(cfg.grad_accum));
      }
      break;
    }

    std::size_t targets = 0;
    for (const auto& mb : group) targets += mb.target_count();
    if (targets == 0) throw ContractError("run_stage: accumulation group has no target tokens");

    const double lr = cosine_lr(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr, cfg.min_lr);
    opt.zero_grad();
    double step_loss = 0;
    for (const auto& mb : group) {
      Tape<T> tape;
      const double weight = static_cast<double>(mb.target_count()) / static_cast<double>(targets);
      auto loss = detail::micro_batch_loss(model, reference ? &*reference : nullptr, mb, cfg, tokens_seen);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        tape.backward(loss);
        throw NumericAbort(step, lr, opt.max_grad_norm());
      }
      step_loss += weight * value;
      tape.backward(scale(loss, static_cast<T>(weight)));
    }
    opt.step(lr);
    ++result.optimizer_steps;

    StepMetrics m{step, cfg.stage, lr, step_loss, tokens_seen};
    result.metrics.push_back(m);
    if (hooks.on_step) hooks.on_step(m);
    const bool periodic = cfg.checkpoint_every && step % cfg.checkpoint_every == 0;
    if (hooks.on_checkpoint && periodic && step != cfg.total_steps) hooks.on_checkpoint(model, opt, step);
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(model, opt, result.optimizer_steps);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics log

inline constexpr const char* kMetricsHeader = "step,stage,lr,loss,tokens_seen";

inline std::string metrics_row(const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%d,%.9g,%.9g,%zu", m.step, m.stage, m.lr, m.loss, m.tokens_seen);
  return buf;
}

/// Means of consecutive, non-overlapping windows of `window` losses.
inline std::vector<double> block_means(const std::vector<StepMetrics>& metrics, std::size_t window) {
  std::vector<double> out;
  for (std::size_t start = 0; start + window <= metrics.size(); start += window) {
    double s = 0;
    for (std::size_t i = start; i < start + window; ++i) s += metrics[i].loss;
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

}  // namespace forge
