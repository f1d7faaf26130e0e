#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "forge/model.hpp"

namespace forge {

/// Linear warmup 0 -> peak, then cosine decay to min_lr at total_steps.
inline double cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                        double peak, double min_lr) {
  if (step > total_steps || warmup_steps > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " / warmup " +
                        std::to_string(warmup_steps) + " outside [0, " +
                        std::to_string(total_steps) + "]");
  }
  if (step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return peak;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adaptive moments with decoupled weight decay. Decay touches only
/// parameters flagged `decay` (matrix weights).
template <class T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value.numel(), T(0));
      v_.emplace_back(p.value.numel(), T(0));
    }
  }

  const std::vector<NamedParam<T>>& params() const { return params_; }
  const AdamWConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Largest per-parameter L2 gradient norm, for diagnostics.
  double max_grad_norm() const {
    double worst = 0;
    for (const auto& p : params_) {
      double ss = 0;
      for (T g : p.value.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
      worst = std::max(worst, std::sqrt(ss));
    }
    return worst;
  }

  void step(double lr) {
    ++step_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    const T eps = static_cast<T>(cfg_.eps);
    const T rate = static_cast<T>(lr);
    const T shrink = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto values = p.value.data();
      const std::vector<T> grads = p.value.grad_or_zeros();
      auto& m = m_[k];
      auto& v = v_[k];
      const bool decay = p.decay && cfg_.weight_decay != 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T g = grads[i];
        if (decay) values[i] *= shrink;
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        values[i] -= rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }

  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_step_count(std::size_t s) { step_ = s; }

 private:
  std::vector<NamedParam<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace forge
