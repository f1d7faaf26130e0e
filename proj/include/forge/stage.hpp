#pragma once

// Per-stage training contracts: learning rates, freezing and accumulation.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "forge/model.hpp"

namespace forge {

enum class Objective { Lm, LmDpo };

inline const char* to_string(Objective o) { return o == Objective::Lm ? "lm" : "lm+dpo"; }

inline Objective objective_from_string(const std::string& s) {
  if (s == "lm") return Objective::Lm;
  if (s == "lm+dpo") return Objective::LmDpo;
  throw ConfigError("objective: expected \"lm\" or \"lm+dpo\", got \"" + s + "\"");
}

struct StageConfig {
  int stage = 1;
  double peak_lr = 0, min_lr = 0;
  std::size_t warmup_steps = 0, total_steps = 0;
  std::vector<std::string> freeze;  // subset of {encoder, projector, decoder}
  std::size_t grad_accum = 1;
  std::size_t max_seq_len = 0;
  double weight_decay = 0.0;
  std::string objective = "lm";
  std::size_t micro_batch = 1;
  std::size_t checkpoint_every = 0;  // 0: only at the end of the stage
  double dpo_beta = 0.1;
  double dpo_weight = 1.0;

  bool operator==(const StageConfig&) const = default;

  /// Throws ConfigError naming the offending field (prefixed by `path`).
  void validate(const std::string& path = "stage_cfg") const {
    auto fail = [&](const std::string& key, const std::string& why) {
      throw ConfigError(path + "." + key + ": " + why);
    };
    if (stage < 1 || stage > 3) fail("stage", "must be 1, 2 or 3");
    if (grad_accum < 1) fail("grad_accum", "must be >= 1");
    if (micro_batch < 1) fail("micro_batch", "must be >= 1");
    if (total_steps < 1) fail("total_steps", "must be >= 1");
    if (warmup_steps > total_steps) fail("warmup_steps", "exceeds total_steps");
    if (!(peak_lr > 0)) fail("peak_lr", "must be positive");
    if (min_lr < 0 || min_lr > peak_lr) fail("min_lr", "must lie in [0, peak_lr]");
    if (max_seq_len < 1) fail("max_seq_len", "must be >= 1");
    if (weight_decay < 0) fail("weight_decay", "must be non-negative");
    if (!(dpo_beta > 0)) fail("dpo_beta", "must be positive");
    objective_from_string(objective);
    std::set<std::string> f;
    for (const auto& name : freeze) {
      if (name != "encoder" && name != "projector" && name != "decoder") {
        fail("freeze", "unknown component \"" + name + "\"");
      }
      f.insert(name);
    }
    const bool ok = stage == 1   ? f.count("encoder") && f.count("projector")
                    : stage == 2 ? f == std::set<std::string>{"decoder"}
                                 : f.empty();
    if (!ok) {
      fail("freeze", stage == 1   ? "stage 1 must freeze encoder and projector"
                     : stage == 2 ? "stage 2 must freeze exactly the decoder"
                                  : "stage 3 trains every component");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(StageConfig, stage, peak_lr, min_lr, warmup_steps, total_steps,
                                   freeze, grad_accum, max_seq_len, weight_decay, objective,
                                   micro_batch, checkpoint_every, dpo_beta, dpo_weight)

/// Stage hyperparameters for a model variant. The 1b and 4b variants carry
/// their full-scale per-stage learning rates, with the 4B stage-1 rate at 2e-4
/// unless `table2_lr` selects 2e-5. The toy and micro variants carry
/// desk-scale settings.
inline StageConfig stage_defaults(const std::string& variant, int stage, bool table2_lr = false) {
  if (stage < 1 || stage > 3) throw ConfigError("stage: must be 1, 2 or 3");
  StageConfig c;
  c.stage = stage;
  c.freeze = stage == 1   ? std::vector<std::string>{"encoder", "projector"}
             : stage == 2 ? std::vector<std::string>{"decoder"}
                          : std::vector<std::string>{};
  c.grad_accum = stage == 1 ? 2 : 1;
  c.weight_decay = stage == 3 ? 0.01 : 0.0;
  if (variant == "1b" || variant == "4b") {
    static constexpr double kLr1b[] = {3e-4, 2e-5, 4e-5};
    static constexpr double kLr4b[] = {2e-4, 4e-5, 4e-5};
    c.peak_lr = variant == "1b" ? kLr1b[stage - 1] : kLr4b[stage - 1];
    if (variant == "4b" && stage == 1 && table2_lr) c.peak_lr = 2e-5;
    c.max_seq_len = variant == "1b" ? 16384 : 32768;
    c.total_steps = 1000;
    c.micro_batch = 1;
  } else if (variant == "toy" || variant == "micro") {
    static constexpr double kLrToy[] = {2e-3, 1e-3, 5e-4};
    static constexpr std::size_t kSteps[] = {500, 2400, 1000};
    static constexpr std::size_t kBatch[] = {8, 32, 32};
    c.peak_lr = kLrToy[stage - 1];
    c.total_steps = kSteps[stage - 1];
    c.micro_batch = kBatch[stage - 1];
    c.max_seq_len = variant == "toy" ? 128 : 32;
  } else {
    throw ConfigError("model: unknown variant \"" + variant + "\"");
  }
  c.min_lr = c.peak_lr / 10.0;
  c.warmup_steps = static_cast<std::size_t>(std::llround(0.02 * static_cast<double>(c.total_steps)));
  return c;
}

/// Marks parameters of frozen components as non-differentiable and returns
/// the trainable ones.
template <class T>
std::vector<NamedParam<T>> apply_freeze(VlmModel<T>& model, const std::vector<std::string>& freeze) {
  std::set<Component> frozen;
  for (const auto& name : freeze) frozen.insert(component_from_string(name));
  std::vector<NamedParam<T>> trainable;
  for (auto& p : model.parameters()) {
    const bool train = !frozen.count(p.component);
    p.value.set_requires_grad(train);
    if (train) trainable.push_back(p);
  }
  return trainable;
}

}  // namespace forge
