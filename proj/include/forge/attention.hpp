#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "forge/nn.hpp"

namespace forge {

/// A contiguous run of rows forming one sequence in a packed batch.
struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

inline void check_segments(const std::vector<Segment>& segments, std::size_t rows) {
  std::size_t next = 0;
  for (const auto& s : segments) {
    if (s.start != next) break;
    next += s.length;
  }
  if (next != rows) {
    throw DimensionError("attention: segments cover " + std::to_string(next) +
                         " rows but the sequence has " + std::to_string(rows));
  }
}

/// Scaled dot-product attention over packed sequences. q, k, v are
/// [N x heads*dh]; rows attend only within their segment, and only to earlier
/// rows when `causal`.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, const std::vector<Segment>& segments,
                               bool causal) {
  detail::require_same_shape("attention", q, k);
  detail::require_same_shape("attention", q, v);
  detail::require_rank("attention", q, 2);
  const std::size_t n = q.dim(0);
  const std::size_t width = q.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  check_segments(segments, n);
  const std::size_t dh = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Strided = Eigen::OuterStride<>;
  using ConstBlock = Eigen::Map<const Mat, 0, Strided>;
  using Block = Eigen::Map<Mat, 0, Strided>;
  const auto w = static_cast<Eigen::Index>(width);

  auto out = Tensor<T>::zeros(q.shape());
  std::vector<Mat> probs;
  probs.reserve(segments.size() * heads);
  for (const auto& seg : segments) {
    const auto len = static_cast<Eigen::Index>(seg.length);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = seg.start * width + h * dh;
      ConstBlock qh(q.data().data() + off, len, dh, Strided(w));
      ConstBlock kh(k.data().data() + off, len, dh, Strided(w));
      ConstBlock vh(v.data().data() + off, len, dh, Strided(w));
      Mat p = (qh * kh.transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < len; ++i) {
        const Eigen::Index visible = causal ? i + 1 : len;
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < visible; ++j) mx = std::max(mx, p(i, j));
        T z = 0;
        for (Eigen::Index j = 0; j < visible; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        for (Eigen::Index j = 0; j < visible; ++j) p(i, j) /= z;
        for (Eigen::Index j = visible; j < len; ++j) p(i, j) = T(0);
      }
      Block(out.data().data() + off, len, dh, Strided(w)).noalias() = p * vh;
      probs.push_back(std::move(p));
    }
  }

  detail::record<T>(
      {&q, &k, &v}, out,
      [sq = q.storage(), sk = k.storage(), sv = v.storage(), probs = std::move(probs),
       segments, heads, dh, w, scale_factor](const std::vector<T>& g) {
        T* gq = detail::grad_target(sq);
        T* gk = detail::grad_target(sk);
        T* gv = detail::grad_target(sv);
        std::size_t idx = 0;
        for (const auto& seg : segments) {
          const auto len = static_cast<Eigen::Index>(seg.length);
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const std::size_t off = seg.start * static_cast<std::size_t>(w) + h * dh;
            const Mat& p = probs[idx];
            ConstBlock go(g.data() + off, len, dh, Strided(w));
            if (gv) {
              Block(gv + off, len, dh, Strided(w)).noalias() += p.transpose() * go;
            }
            if (!gq && !gk) continue;
            ConstBlock vh(sv->data.data() + off, len, dh, Strided(w));
            Mat dp = go * vh.transpose();
            Mat ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
            ds -= p.cwiseProduct(rowdot.replicate(1, len));
            ds *= scale_factor;
            if (gq) {
              ConstBlock kh(sk->data.data() + off, len, dh, Strided(w));
              Block(gq + off, len, dh, Strided(w)).noalias() += ds * kh;
            }
            if (gk) {
              ConstBlock qh(sq->data.data() + off, len, dh, Strided(w));
              Block(gk + off, len, dh, Strided(w)).noalias() += ds.transpose() * qh;
            }
          }
        }
      });
  return out;
}

template <class T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;  // [d x d]
  Tensor<T> q_gain, k_gain;  // [head_dim], used with QK-Norm
};

/// Everything attention needs to know about the packed rows.
template <class T>
struct SequenceLayout {
  std::vector<Segment> segments;
  RopeTable<T> rope;
  bool causal = false;
};

/// Multi-head attention: project, rotate, optionally QK-normalize, attend,
/// project back.
template <class T>
Tensor<T> mha_forward(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t heads,
                      const SequenceLayout<T>& layout, bool use_qk_norm) {
  auto q = rope_apply(matmul(x, p.wq), layout.rope);
  auto k = rope_apply(matmul(x, p.wk), layout.rope);
  const auto v = matmul(x, p.wv);
  if (use_qk_norm) std::tie(q, k) = qk_normalize(q, k, p.q_gain, p.k_gain);
  return matmul(scaled_dot_attention(q, k, v, heads, layout.segments, layout.causal), p.wo);
}

}  // namespace forge
