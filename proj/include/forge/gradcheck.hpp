#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

/// Compares tape gradients of a scalar function against central differences.
///
/// `fn` maps the inputs to a scalar tensor. Every input is made
/// differentiable, the analytic gradient is taken with one tape pass, and each
/// element is then perturbed by +-eps with the tape disabled. Returns the
/// maximum over all elements of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class Fn>
double gradcheck(Fn&& fn, std::vector<Tensor<double>> inputs, double eps = 1e-3) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tape<double> tape;
    const Tensor<double> y = fn(inputs);
    tape.backward(y);
  }
  double worst = 0.0;
  for (auto& x : inputs) {
    const std::vector<double> analytic = x.grad_or_zeros();
    auto values = x.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = fn(inputs).item();
      values[i] = saved - eps;
      const double down = fn(inputs).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace forge
