#pragma once

// Dynamic patch planning, resampling, patchification, patch embedding and
// binary PPM I/O.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "forge/config.hpp"
#include "forge/nn.hpp"

namespace forge {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  static constexpr std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;  // row-major, RGB interleaved

  Image() = default;
  Image(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(h * w * channels, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  bool operator==(const Image&) const = default;
};

struct PatchPlan {
  std::size_t patch_size = 0;
  std::size_t resized_h = 0, resized_w = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t token_count() const { return grid_h * grid_w; }
  bool operator==(const PatchPlan&) const = default;
};

struct OversizeImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Picks the smallest allowed patch p with ceil(max_side / p)^2 <= budget;
/// each side is rounded up to a multiple of p.
inline PatchPlan plan_patches(std::size_t height, std::size_t width,
                              std::size_t patch_budget = 1024,
                              const std::vector<std::size_t>& sizes = default_patch_sizes()) {
  if (height == 0 || width == 0) throw ContractError("plan_patches: image extents must be positive");
  std::vector<std::size_t> allowed = sizes;
  std::sort(allowed.begin(), allowed.end());
  const std::size_t side = std::max(height, width);
  for (std::size_t p : allowed) {
    const std::size_t g = (side + p - 1) / p;
    if (g * g > patch_budget) continue;
    PatchPlan plan;
    plan.patch_size = p;
    plan.grid_h = (height + p - 1) / p;
    plan.grid_w = (width + p - 1) / p;
    plan.resized_h = plan.grid_h * p;
    plan.resized_w = plan.grid_w * p;
    return plan;
  }
  throw OversizeImageError("plan_patches: " + std::to_string(height) + "x" +
                           std::to_string(width) + " image exceeds a budget of " +
                           std::to_string(patch_budget) + " patches at every allowed size");
}

/// Bilinear resampling with half-pixel centres and edge clamping.
inline Image resize_image(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ContractError("resize_image: target extents must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  Image out(out_h, out_w);
  auto source = [](std::size_t i, std::size_t in, std::size_t out_len, std::size_t& lo,
                   std::size_t& hi, double& frac) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                   static_cast<double>(out_len) -
               0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, in - 1);
    frac = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, img.height, out_h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, img.width, out_w, x0, x1, fx);
      for (std::size_t c = 0; c < Image::channels; ++c) {
        const double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

/// Row-major raster of p x p patches, each flattened channel-last, values in [0, 1].
template <class T>
Tensor<T> patchify(const Image& img, const PatchPlan& plan) {
  if (img.height != plan.resized_h || img.width != plan.resized_w) {
    throw DimensionError("patchify: image is " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " but the plan expects " +
                         std::to_string(plan.resized_h) + "x" + std::to_string(plan.resized_w));
  }
  const std::size_t p = plan.patch_size;
  const std::size_t len = p * p * Image::channels;
  auto out = Tensor<T>::zeros({plan.token_count(), len});
  auto o = out.data();
  for (std::size_t gy = 0; gy < plan.grid_h; ++gy)
    for (std::size_t gx = 0; gx < plan.grid_w; ++gx) {
      T* row = o.data() + (gy * plan.grid_w + gx) * len;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < Image::channels; ++c)
            *row++ = static_cast<T>(img.at(gy * p + y, gx * p + x, c)) / T(255);
    }
  return out;
}

/// Inverse of patchify.
template <class T>
Image reassemble(const Tensor<T>& patches, const PatchPlan& plan) {
  const std::size_t p = plan.patch_size;
  Image img(plan.resized_h, plan.resized_w);
  auto pv = patches.data();
  std::size_t i = 0;
  for (std::size_t gy = 0; gy < plan.grid_h; ++gy)
    for (std::size_t gx = 0; gx < plan.grid_w; ++gx)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < Image::channels; ++c)
            img.at(gy * p + y, gx * p + x, c) =
                static_cast<std::uint8_t>(std::lround(pv[i++] * T(255)));
  return img;
}

template <class T>
struct PatchEmbedding {
  Tensor<T> weight;  // [p*p*3 x d]
  Tensor<T> bias;    // [d]
};

/// Embedded patch tokens plus their grid coordinates for 2D rotary encoding.
template <class T>
struct PatchTokens {
  Tensor<T> tokens;  // [token_count x d]
  std::vector<std::int32_t> rows, cols;
};

/// Linear projection of each patch, plus the absolute positional bias
/// resampled to the plan's grid.
template <class T>
PatchTokens<T> embed_patches(const Tensor<T>& patches,
                             const std::map<std::size_t, PatchEmbedding<T>>& embeddings,
                             const PatchPlan& plan, const PosBiasTable<T>& bias_table) {
  const auto it = embeddings.find(plan.patch_size);
  if (it == embeddings.end()) {
    throw ContractError("embed_patches: no embedding matrix for patch size " +
                        std::to_string(plan.patch_size));
  }
  PatchTokens<T> out;
  out.tokens = add(add_bias(matmul(patches, it->second.weight), it->second.bias),
                   abs_pos_bias(plan.grid_h, plan.grid_w, bias_table));
  for (std::size_t r = 0; r < plan.grid_h; ++r)
    for (std::size_t c = 0; c < plan.grid_w; ++c) {
      out.rows.push_back(static_cast<std::int32_t>(r));
      out.cols.push_back(static_cast<std::int32_t>(c));
    }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

struct PpmError : std::runtime_error {
  PpmError(const std::string& what, std::size_t offset)
      : std::runtime_error("ppm: " + what + " at byte " + std::to_string(offset)),
        byte_offset(offset) {}
  std::size_t byte_offset;
};

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > (1u << 24)) throw PpmError(std::string(field) + " too large", start);
      ++pos;
    }
    if (pos == start) throw PpmError(std::string("expected ") + field, start);
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P') throw PpmError("missing magic number", 0);
  if (bytes[1] != '6') {
    throw PpmError(std::string("unsupported format P") + static_cast<char>(bytes[1]) +
                       " (only binary P6 is supported)",
                   0);
  }
  pos = 2;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (width == 0 || height == 0) throw PpmError("zero image extent", pos);
  if (maxval != 255) throw PpmError("maxval must be 255", pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw PpmError("expected whitespace after header", pos);
  }
  ++pos;
  Image img(height, width);
  if (bytes.size() - pos < img.pixels.size()) {
    throw PpmError("truncated payload: need " + std::to_string(img.pixels.size()) +
                       " bytes, have " + std::to_string(bytes.size() - pos),
                   bytes.size());
  }
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.pixels.size(),
              img.pixels.begin());
  return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  return bytes;
}

inline Image load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PpmError("cannot open " + path.string(), 0);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

inline void save_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PpmError("cannot write " + path.string(), 0);
  const auto bytes = encode_ppm(img);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace forge
