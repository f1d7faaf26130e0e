#pragma once

// Differentiable tensor operations. Every op checks shapes, computes its
// forward value and, when recording, registers a backward rule that
// accumulates into the gradients of inputs that require them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "forge/tensor.hpp"

namespace forge {

template <class T>
using RowMajorMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstRowMajorMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <class T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

}  // namespace detail

/// a[m x k] . b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) +
                         " by " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  auto out = Tensor<T>::zeros({a.dim(0), b.dim(1)});
  RowMajorMap<T>(out.data().data(), m, n).noalias() =
      ConstRowMajorMap<T>(a.data().data(), m, k) *
      ConstRowMajorMap<T>(b.data().data(), k, n);
  detail::record<T>({&a, &b}, out,
                    [sa = a.storage(), sb = b.storage(), m, k, n](const std::vector<T>& g) {
                      ConstRowMajorMap<T> grad(g.data(), m, n);
                      if (T* ga = detail::grad_target(sa)) {
                        RowMajorMap<T>(ga, m, k).noalias() +=
                            grad * ConstRowMajorMap<T>(sb->data.data(), k, n).transpose();
                      }
                      if (T* gb = detail::grad_target(sb)) {
                        RowMajorMap<T>(gb, k, n).noalias() +=
                            ConstRowMajorMap<T>(sa->data.data(), m, k).transpose() * grad;
                      }
                    });
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  auto out = a.clone();
  out.set_requires_grad(false);
  auto o = out.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  detail::record<T>({&a, &b}, out, [sa = a.storage(), sb = b.storage()](const std::vector<T>& g) {
    for (const auto* s : {&sa, &sb}) {
      if (T* gx = detail::grad_target(*s)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  auto out = a.clone();
  out.set_requires_grad(false);
  auto o = out.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  detail::record<T>({&a, &b}, out, [sa = a.storage(), sb = b.storage()](const std::vector<T>& g) {
    if (T* ga = detail::grad_target(sa)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = detail::grad_target(sb)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  detail::record<T>({&a, &b}, out, [sa = a.storage(), sb = b.storage()](const std::vector<T>& g) {
    if (T* ga = detail::grad_target(sa)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sb->data[i];
    }
    if (T* gb = detail::grad_target(sb)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * sa->data[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  detail::record<T>({&x}, out, [sx = x.storage(), factor](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    }
  });
  return out;
}

/// x[... x d] + bias[d], broadcast over leading dimensions.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() == 0 || bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: cannot broadcast " + to_string(bias.shape()) +
                         " over " + to_string(x.shape()));
  }
  const std::size_t d = bias.dim(0);
  auto out = x.clone();
  out.set_requires_grad(false);
  auto o = out.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % d];
  detail::record<T>({&x, &bias}, out, [sx = x.storage(), sb = bias.storage(), d](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (T* gb = detail::grad_target(sb)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
    }
  });
  return out;
}

/// Sum of all elements, accumulated left to right.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  detail::record<T>({&x}, out, [sx = x.storage()](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t i = 0; i < sx->data.size(); ++i) gx[i] += g[0];
    }
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Population variance over all elements.
template <class T>
Tensor<T> variance(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw ContractError("variance of an empty tensor");
  T mu = 0;
  for (T v : x.data()) mu += v;
  mu /= static_cast<T>(n);
  T acc = 0;
  for (T v : x.data()) acc += (v - mu) * (v - mu);
  auto out = Tensor<T>::scalar(acc / static_cast<T>(n));
  detail::record<T>({&x}, out, [sx = x.storage(), mu, n](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      const T c = T(2) * g[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) gx[i] += c * (sx->data[i] - mu);
    }
  });
  return out;
}

/// Same values under a new shape with equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " +
                         to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  detail::record<T>({&x}, out, [sx = x.storage()](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0);
  const std::size_t c = x.dim(1);
  auto out = Tensor<T>::zeros({c, r});
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = xv[i * c + j];
  detail::record<T>({&x}, out, [sx = x.storage(), r, c](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    }
  });
  return out;
}

namespace detail {

// Views a tensor as [outer x extent x inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Concatenates along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) {
      throw DimensionError("concat: rank mismatch " + to_string(first) + " vs " +
                           to_string(probe));
    }
    probe[axis] = first[axis];
    if (probe != first) {
      throw DimensionError("concat: incompatible shapes " + to_string(first) +
                           " and " + to_string(p.shape()));
    }
    shape[axis] += p.dim(axis);
  }
  auto out = Tensor<T>::zeros(shape);
  const auto total = detail::split_axis(shape, axis);
  auto o = out.data();
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto s = detail::split_axis(p.shape(), axis);
    const std::size_t run = s.extent * s.inner;
    auto pv = p.data();
    for (std::size_t q = 0; q < s.outer; ++q) {
      std::copy_n(pv.begin() + q * run, run,
                  o.begin() + q * total.extent * total.inner + offset * total.inner);
    }
    offset += s.extent;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && Tape<T>::active() != nullptr) {
    std::vector<std::shared_ptr<TensorStorage<T>>> inputs;
    for (const auto& p : parts) inputs.push_back(p.storage());
    out.storage()->requires_grad = true;
    Tape<T>::active()->record([o_s = out.storage(), inputs, offsets, total, axis]() {
      if (o_s->grad.empty()) return;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        T* gp = detail::grad_target(inputs[k]);
        if (!gp) continue;
        const auto s = detail::split_axis(inputs[k]->shape, axis);
        const std::size_t run = s.extent * s.inner;
        for (std::size_t q = 0; q < s.outer; ++q) {
          const T* src = o_s->grad.data() + q * total.extent * total.inner +
                         offsets[k] * total.inner;
          for (std::size_t i = 0; i < run; ++i) gp[q * run + i] += src[i];
        }
      }
    });
  }
  return out;
}

/// Elements [start, start + length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start,
                std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  auto out = Tensor<T>::zeros(shape);
  const auto src = detail::split_axis(x.shape(), axis);
  const std::size_t run = length * src.inner;
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t q = 0; q < src.outer; ++q) {
    std::copy_n(xv.begin() + q * src.extent * src.inner + start * src.inner, run,
                o.begin() + q * run);
  }
  detail::record<T>({&x}, out, [sx = x.storage(), src, start, run](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t q = 0; q < src.outer; ++q) {
        T* dst = gx + q * src.extent * src.inner + start * src.inner;
        for (std::size_t i = 0; i < run; ++i) dst[i] += g[q * run + i];
      }
    }
  });
  return out;
}

/// Gathers rows of table[V x d] for each id.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require_rank("embedding", table, 2);
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  auto out = Tensor<T>::zeros({ids.size(), d});
  auto o = out.data();
  auto tv = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[r]) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.begin() + ids[r] * d, d, o.begin() + r * d);
  }
  detail::record<T>({&table}, out,
                    [st = table.storage(), idv = std::vector<std::int32_t>(ids.begin(), ids.end()),
                     d](const std::vector<T>& g) {
                      if (T* gt = detail::grad_target(st)) {
                        for (std::size_t r = 0; r < idv.size(); ++r)
                          for (std::size_t j = 0; j < d; ++j) gt[idv[r] * d + j] += g[r * d + j];
                      }
                    });
  return out;
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + to_string(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t q = 0; q < s.outer; ++q) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = q * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      T z = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(xv[base + e * s.inner] - mx);
        o[base + e * s.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) o[base + e * s.inner] /= z;
    }
  }
  detail::record<T>({&x}, out, [sx = x.storage(), so = out.storage(), s](const std::vector<T>& g) {
    T* gx = detail::grad_target(sx);
    if (!gx) return;
    const auto& y = so->data;
    for (std::size_t q = 0; q < s.outer; ++q) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = q * s.extent * s.inner + in;
        T dot = 0;
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t i = base + e * s.inner;
          dot += g[i] * y[i];
        }
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t i = base + e * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
  return out;
}

enum class Reduction { Mean, Sum };

/// Negative log-likelihood of `targets` under row-wise softmax of
/// logits[T x V], over positions where `mask` is true.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask,
                        Reduction reduction = Reduction::Mean) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every position is masked");

  auto lv = logits.data();
  std::vector<T> probs(rows * vocab, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = lv.data() + r * vocab;
    T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[r * vocab + v] = std::exp(row[v] - mx);
      z += probs[r * vocab + v];
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] /= z;
    total += std::log(z) + mx - row[targets[r]];
  }
  const T norm = reduction == Reduction::Mean ? T(1) / static_cast<T>(count) : T(1);
  auto out = Tensor<T>::scalar(total * norm);
  detail::record<T>({&logits}, out,
                    [sl = logits.storage(), probs = std::move(probs),
                     tv = std::vector<std::int32_t>(targets.begin(), targets.end()),
                     mv = std::vector<std::uint8_t>(mask.begin(), mask.end()), rows, vocab,
                     norm](const std::vector<T>& g) {
                      T* gl = detail::grad_target(sl);
                      if (!gl) return;
                      const T c = g[0] * norm;
                      for (std::size_t r = 0; r < rows; ++r) {
                        if (!mv[r]) continue;
                        for (std::size_t v = 0; v < vocab; ++v)
                          gl[r * vocab + v] += c * probs[r * vocab + v];
                        gl[r * vocab + tv[r]] -= c;
                      }
                    });
  return out;
}

namespace detail {

template <class T>
T sigmoid_scalar(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// Applies f elementwise with derivative df(x, y).
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  auto out = Tensor<T>::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(xv[i]);
  detail::record<T>({&x}, out, [sx = x.storage(), so = out.storage(), df](const std::vector<T>& g) {
    if (T* gx = detail::grad_target(sx)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(sx->data[i], so->data[i]);
    }
  });
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return detail::sigmoid_scalar(v); },
                       [](T, T y) { return y * (T(1) - y); });
}

/// log(1 + exp(x)), computed without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) { return detail::sigmoid_scalar(v); });
}

}  // namespace forge
