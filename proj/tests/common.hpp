#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "forge/random.hpp"
#include "forge/tensor.hpp"

namespace forge::testing {

using Td = Tensor<double>;
using Tf = Tensor<float>;

inline Td tensor(Shape shape, std::vector<double> values, bool grad = false) {
  return Td(std::move(shape), std::move(values), grad);
}

inline Td random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  auto t = Td::zeros(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

template <class T>
std::vector<T> values_of(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("forge_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace forge::testing
