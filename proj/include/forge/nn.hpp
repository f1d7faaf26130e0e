#pragma once

// Normalization, activation and positional-encoding primitives.

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "forge/ops.hpp"

namespace forge {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kRmsNormEps = 1e-6;

/// Row-wise layer normalization over the last dimension, then gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(kLayerNormEps)) {
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  if (gain.rank() != 1 || bias.shape() != gain.shape() || x.rank() == 0 ||
      x.shape().back() != gain.dim(0)) {
    throw DimensionError("layer_norm: gain " + to_string(gain.shape()) + ", bias " +
                         to_string(bias.shape()) + " do not fit " + to_string(x.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = x.numel() / d;
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      o[r * d + j] = h * gv[j] + bv[j];
    }
  }
  detail::record<T>({&x, &gain, &bias}, out,
                    [sx = x.storage(), sg = gain.storage(), sb = bias.storage(),
                     xhat = std::move(xhat), inv_std = std::move(inv_std), d,
                     rows](const std::vector<T>& g) {
                      T* gx = detail::grad_target(sx);
                      T* gg = detail::grad_target(sg);
                      T* gb = detail::grad_target(sb);
                      const auto& gain_v = sg->data;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* gr = g.data() + r * d;
                        const T* hr = xhat.data() + r * d;
                        if (gg)
                          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
                        if (gb)
                          for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
                        if (!gx) continue;
                        T mean_dh = 0, mean_dh_h = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                          const T dh = gr[j] * gain_v[j];
                          mean_dh += dh;
                          mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= static_cast<T>(d);
                        mean_dh_h /= static_cast<T>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                          const T dh = gr[j] * gain_v[j];
                          gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                      }
                    });
  return out;
}

/// Divides each group of gain.size() consecutive values by its root mean
/// square, then applies the gain. With gain size equal to the last extent this
/// is the usual row-wise RMSNorm; smaller gains normalize per head.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(kRmsNormEps)) {
  if (!(eps > T(0))) throw ContractError("rms_norm: eps must be positive");
  if (gain.rank() != 1 || gain.dim(0) == 0 || x.numel() % gain.dim(0) != 0 ||
      (x.rank() > 0 && x.shape().back() % gain.dim(0) != 0)) {
    throw DimensionError("rms_norm: gain " + to_string(gain.shape()) + " does not fit " +
                         to_string(x.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = x.numel() / d;
  auto out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_rms(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    inv_rms[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = row[j] * inv_rms[r] * gv[j];
  }
  detail::record<T>({&x, &gain}, out,
                    [sx = x.storage(), sg = gain.storage(), inv_rms = std::move(inv_rms), d,
                     rows](const std::vector<T>& g) {
                      T* gx = detail::grad_target(sx);
                      T* gg = detail::grad_target(sg);
                      const auto& xd = sx->data;
                      const auto& gain_v = sg->data;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* gr = g.data() + r * d;
                        const T* xr = xd.data() + r * d;
                        const T s = inv_rms[r];
                        if (gg)
                          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * s;
                        if (!gx) continue;
                        T mean_dn_n = 0;
                        for (std::size_t j = 0; j < d; ++j)
                          mean_dn_n += gr[j] * gain_v[j] * xr[j] * s;
                        mean_dn_n /= static_cast<T>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                          gx[r * d + j] += s * (gr[j] * gain_v[j] - xr[j] * s * mean_dn_n);
                        }
                      }
                    });
  return out;
}

/// x * sigmoid(x)
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * detail::sigmoid_scalar(v); },
      [](T v, T) {
        const T s = detail::sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

/// (silu(x W1) * (x W3)) W2
template <class T>
Tensor<T> swiglu_ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w3,
                     const Tensor<T>& w2) {
  if (w1.shape() != w3.shape() || w2.rank() != 2 || w1.rank() != 2 ||
      w2.dim(0) != w1.dim(1) || w2.dim(1) != w1.dim(0)) {
    throw DimensionError("swiglu_ffn: W1 " + to_string(w1.shape()) + ", W3 " +
                         to_string(w3.shape()) + ", W2 " + to_string(w2.shape()) +
                         " are inconsistent");
  }
  return matmul(mul(silu(matmul(x, w1)), matmul(x, w3)), w2);
}

/// RMS-normalizes every head_dim-wide query and key vector with its gain.
template <class T>
std::pair<Tensor<T>, Tensor<T>> qk_normalize(const Tensor<T>& q, const Tensor<T>& k,
                                             const Tensor<T>& gain_q, const Tensor<T>& gain_k,
                                             T eps = T(kRmsNormEps)) {
  return {rms_norm(q, gain_q, eps), rms_norm(k, gain_k, eps)};
}

// ---------------------------------------------------------------------------
// Rotary position embedding

enum class RopeScaling { DynamicNtk, LinearInterpolation };

struct RopeContext {
  double base_theta = 10000.0;
  std::size_t head_dim = 0;
  std::size_t trained_max_len = 0;
  double effective_theta = 10000.0;
  /// Positions are divided by this factor (linear interpolation mode only).
  double position_scale = 1.0;
  /// Longest sequence the context admits.
  std::size_t context_len = 0;
};

/// Dynamic NTK rescaling: base * s^(dh/(dh-2)) with s = target/trained, or the
/// base itself when the target fits the trained length.
inline double rope_dynamic_scale(double base_theta, std::size_t trained_max_len,
                                 std::size_t target_len, std::size_t head_dim) {
  if (head_dim <= 2) throw ContractError("rope_dynamic_scale: head_dim must exceed 2");
  if (target_len < 1) throw ContractError("rope_dynamic_scale: target_len must be >= 1");
  if (target_len <= trained_max_len) return base_theta;
  const double s = static_cast<double>(target_len) / static_cast<double>(trained_max_len);
  const double dh = static_cast<double>(head_dim);
  return base_theta * std::pow(s, dh / (dh - 2.0));
}

/// Context for running at `target_len` after training at `trained_max_len`.
inline RopeContext make_rope_context(double base_theta, std::size_t head_dim,
                                     std::size_t trained_max_len, std::size_t target_len,
                                     RopeScaling scaling = RopeScaling::DynamicNtk) {
  if (head_dim % 2 != 0) throw ContractError("rope: head_dim must be even");
  RopeContext ctx;
  ctx.base_theta = base_theta;
  ctx.head_dim = head_dim;
  ctx.trained_max_len = trained_max_len;
  ctx.effective_theta = base_theta;
  ctx.context_len = std::max(trained_max_len, target_len);
  if (target_len > trained_max_len) {
    if (scaling == RopeScaling::DynamicNtk) {
      ctx.effective_theta =
          rope_dynamic_scale(base_theta, trained_max_len, target_len, head_dim);
    } else {
      ctx.position_scale =
          static_cast<double>(target_len) / static_cast<double>(trained_max_len);
    }
  }
  return ctx;
}

/// Precomputed rotation for every (row, pair). Pair i of a row rotates
/// dimensions (2i, 2i+1) of each head.
template <class T>
struct RopeTable {
  std::size_t rows = 0;
  std::size_t pairs = 0;
  std::vector<T> cos, sin;
};

namespace detail {

template <class T>
void fill_rope(RopeTable<T>& table, std::size_t row, std::size_t first_pair,
               std::size_t count, double position, double theta, std::size_t span_dim) {
  for (std::size_t i = 0; i < count; ++i) {
    const double freq =
        std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(span_dim));
    const double angle = position * freq;
    table.cos[row * table.pairs + first_pair + i] = static_cast<T>(std::cos(angle));
    table.sin[row * table.pairs + first_pair + i] = static_cast<T>(std::sin(angle));
  }
}

}  // namespace detail

/// Angles pos * theta^(-2i/dh) for every row position.
template <class T>
RopeTable<T> rope_table_1d(std::span<const std::int32_t> positions, const RopeContext& ctx) {
  if (ctx.head_dim % 2 != 0) throw ContractError("rope_1d: head_dim must be even");
  RopeTable<T> table;
  table.rows = positions.size();
  table.pairs = ctx.head_dim / 2;
  table.cos.resize(table.rows * table.pairs);
  table.sin.resize(table.rows * table.pairs);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    detail::fill_rope(table, r, 0, table.pairs,
                      static_cast<double>(positions[r]) / ctx.position_scale,
                      ctx.effective_theta, ctx.head_dim);
  }
  return table;
}

/// First half of each head rotated by row index, second half by column index;
/// each half is an independent 1D rotary embedding of width dh/2.
template <class T>
RopeTable<T> rope_table_2d(std::span<const std::int32_t> rows,
                           std::span<const std::int32_t> cols, const RopeContext& ctx) {
  if (ctx.head_dim % 4 != 0) throw ContractError("rope_2d: head_dim must be divisible by 4");
  if (rows.size() != cols.size()) throw DimensionError("rope_2d: rows/cols length mismatch");
  RopeTable<T> table;
  table.rows = rows.size();
  table.pairs = ctx.head_dim / 2;
  table.cos.resize(table.rows * table.pairs);
  table.sin.resize(table.rows * table.pairs);
  const std::size_t half = ctx.head_dim / 2;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::fill_rope(table, r, 0, half / 2, rows[r], ctx.effective_theta, half);
    detail::fill_rope(table, r, half / 2, half / 2, cols[r], ctx.effective_theta, half);
  }
  return table;
}

/// Rotates x[N x (heads * head_dim)] in place of each head using row r's angles.
template <class T>
Tensor<T> rope_apply(const Tensor<T>& x, const RopeTable<T>& table) {
  detail::require_rank("rope", x, 2);
  const std::size_t n = x.dim(0);
  const std::size_t width = x.dim(1);
  const std::size_t dh = table.pairs * 2;
  if (table.rows != n || dh == 0 || width % dh != 0) {
    throw DimensionError("rope: table for " + std::to_string(table.rows) + " rows x " +
                         std::to_string(dh) + " dims does not fit " + to_string(x.shape()));
  }
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto o = out.data();
  const std::size_t heads = width / dh;
  for (std::size_t r = 0; r < n; ++r) {
    const T* c = table.cos.data() + r * table.pairs;
    const T* s = table.sin.data() + r * table.pairs;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = r * width + h * dh;
      for (std::size_t i = 0; i < table.pairs; ++i) {
        const T a = xv[base + 2 * i], b = xv[base + 2 * i + 1];
        o[base + 2 * i] = a * c[i] - b * s[i];
        o[base + 2 * i + 1] = a * s[i] + b * c[i];
      }
    }
  }
  detail::record<T>({&x}, out, [sx = x.storage(), table, n, width, dh, heads](const std::vector<T>& g) {
    T* gx = detail::grad_target(sx);
    if (!gx) return;
    for (std::size_t r = 0; r < n; ++r) {
      const T* c = table.cos.data() + r * table.pairs;
      const T* s = table.sin.data() + r * table.pairs;
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = r * width + h * dh;
        for (std::size_t i = 0; i < table.pairs; ++i) {
          const T ga = g[base + 2 * i], gb = g[base + 2 * i + 1];
          gx[base + 2 * i] += ga * c[i] + gb * s[i];
          gx[base + 2 * i + 1] += -ga * s[i] + gb * c[i];
        }
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> rope_1d(const Tensor<T>& x, std::span<const std::int32_t> positions,
                  const RopeContext& ctx) {
  return rope_apply(x, rope_table_1d<T>(positions, ctx));
}

template <class T>
Tensor<T> rope_2d(const Tensor<T>& x, std::span<const std::int32_t> rows,
                  std::span<const std::int32_t> cols, const RopeContext& ctx) {
  return rope_apply(x, rope_table_2d<T>(rows, cols, ctx));
}

// ---------------------------------------------------------------------------
// 2D absolute positional bias

/// Learned per-cell bias; `table` is [grid_h * grid_w x dim], row-major cells.
template <class T>
struct PosBiasTable {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Tensor<T> table;
};

/// Align-corners bilinear weights mapping an in_h x in_w grid onto out_h x out_w,
/// as a dense [out_h*out_w x in_h*in_w] matrix.
template <class T>
Tensor<T> bilinear_matrix(std::size_t in_h, std::size_t in_w, std::size_t out_h,
                          std::size_t out_w) {
  auto m = Tensor<T>::zeros({out_h * out_w, in_h * in_w});
  auto md = m.data();
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    return out <= 1 || in <= 1 ? 0.0
                               : static_cast<double>(i) * static_cast<double>(in - 1) /
                                     static_cast<double>(out - 1);
  };
  for (std::size_t r = 0; r < out_h; ++r) {
    const double y = coord(r, in_h, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_w; ++c) {
      const double x = coord(c, in_w, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(x));
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double fx = x - static_cast<double>(x0);
      T* row = md.data() + (r * out_w + c) * in_h * in_w;
      row[y0 * in_w + x0] += static_cast<T>((1 - fy) * (1 - fx));
      row[y0 * in_w + x1] += static_cast<T>((1 - fy) * fx);
      row[y1 * in_w + x0] += static_cast<T>(fy * (1 - fx));
      row[y1 * in_w + x1] += static_cast<T>(fy * fx);
    }
  }
  return m;
}

/// Per-patch additive bias for a runtime grid; the trained table is
/// bilinearly resampled when the grids differ.
template <class T>
Tensor<T> abs_pos_bias(std::size_t grid_h, std::size_t grid_w, const PosBiasTable<T>& bias) {
  if (grid_h == 0 || grid_w == 0) throw ContractError("abs_pos_bias: zero-extent grid");
  if (!bias.table.defined() || bias.table.rank() != 2 ||
      bias.table.dim(0) != bias.grid_h * bias.grid_w) {
    throw ContractError("abs_pos_bias: table is not initialized for its grid");
  }
  if (grid_h == bias.grid_h && grid_w == bias.grid_w) return bias.table;
  return matmul(bilinear_matrix<T>(bias.grid_h, bias.grid_w, grid_h, grid_w), bias.table);
}

}  // namespace forge
