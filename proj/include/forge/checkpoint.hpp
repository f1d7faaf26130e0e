#pragma once

// Binary checkpoints.
//
// Layout (all integers little-endian):
//   0   magic "SKVL"
//   4   u32 format version
//   8   u64 config digest
//   16  u32 stage
//   20  u64 step
//   28  u64 seed
//   36  u64 payload length in bytes
//   44  u64 content digest: FNV-1a 64 over bytes [0, 44) followed by the payload
//   52  payload:
//         u32 meta length, meta JSON (UTF-8)
//         u32 blob count, then per blob:
//           u32 name length, name, u32 rank, u64 extent x rank, f32 x numel

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "forge/optim.hpp"

namespace forge {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderSize = 52;

struct CheckpointError : std::runtime_error {
  enum class Kind { Io, BadMagic, VersionSkew, Truncated, DigestMismatch, ConfigMismatch, Malformed };
  CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
  Kind kind;
};

struct Blob {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::uint32_t stage = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string meta;  // JSON: {"config": ModelConfig, "context_len": n}
  std::vector<Blob> blobs;
  std::uint64_t content_digest = 0;  // filled on load

  const Blob* find(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return &b;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> out;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::size_t base)
      : data_(data), size_(size), base_(base) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            "checkpoint: payload ends early at byte " + std::to_string(base_ + pos_));
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::uint8_t* data_;
  std::size_t size_, base_, pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter payload;
  payload.u32(static_cast<std::uint32_t>(ck.meta.size()));
  payload.bytes(ck.meta);
  payload.u32(static_cast<std::uint32_t>(ck.blobs.size()));
  for (const auto& b : ck.blobs) {
    payload.u32(static_cast<std::uint32_t>(b.name.size()));
    payload.bytes(b.name);
    payload.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto e : b.shape) payload.u64(e);
    for (float v : b.values) payload.f32(v);
  }
  detail::ByteWriter file;
  file.bytes("SKVL");
  file.u32(ck.version);
  file.u64(ck.config_digest);
  file.u32(ck.stage);
  file.u64(ck.step);
  file.u64(ck.seed);
  file.u64(payload.out.size());
  std::uint64_t digest = fnv1a64(
      std::string_view(reinterpret_cast<const char*>(file.out.data()), file.out.size()));
  digest = fnv1a64(std::string_view(reinterpret_cast<const char*>(payload.out.data()),
                                    payload.out.size()),
                   digest);
  file.u64(digest);
  file.out.insert(file.out.end(), payload.out.begin(), payload.out.end());
  return file.out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SKVL", 4) != 0) {
    throw CheckpointError(bytes.size() < 4 ? Kind::Truncated : Kind::BadMagic,
                          "checkpoint: missing SKVL magic");
  }
  if (bytes.size() < kCheckpointHeaderSize) {
    throw CheckpointError(Kind::Truncated, "checkpoint: truncated header (" +
                                               std::to_string(bytes.size()) + " bytes)");
  }
  detail::ByteReader header(bytes.data() + 4, kCheckpointHeaderSize - 4, 4);
  Checkpoint ck;
  ck.version = header.u32();
  ck.config_digest = header.u64();
  ck.stage = header.u32();
  ck.step = header.u64();
  ck.seed = header.u64();
  const std::uint64_t payload_len = header.u64();
  const std::uint64_t stored_digest = header.u64();
  if (ck.version != kCheckpointVersion) {
    throw CheckpointError(Kind::VersionSkew, "checkpoint: format version " +
                                                 std::to_string(ck.version) + ", expected " +
                                                 std::to_string(kCheckpointVersion));
  }
  if (bytes.size() - kCheckpointHeaderSize < payload_len) {
    throw CheckpointError(Kind::Truncated, "checkpoint: truncated payload (" +
                                               std::to_string(bytes.size() - kCheckpointHeaderSize) +
                                               " of " + std::to_string(payload_len) + " bytes)");
  }
  std::uint64_t digest = fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), 44));
  digest = fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()) + kCheckpointHeaderSize,
                                    payload_len),
                   digest);
  if (digest != stored_digest) {
    throw CheckpointError(Kind::DigestMismatch, "checkpoint: content digest mismatch (file is corrupt)");
  }
  ck.content_digest = digest;
  detail::ByteReader r(bytes.data() + kCheckpointHeaderSize, payload_len, kCheckpointHeaderSize);
  ck.meta = r.bytes(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b;
    b.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.u64());
    const std::size_t n = numel_of(b.shape);
    b.values.resize(n);
    for (auto& v : b.values) v = r.f32();
    ck.blobs.push_back(std::move(b));
  }
  if (!r.done()) throw CheckpointError(Kind::Malformed, "checkpoint: trailing payload bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Model and optimizer state

template <class T>
Checkpoint capture_state(const VlmModel<T>& model, const AdamW<T>* optimizer, std::uint32_t stage,
                         std::uint64_t step, std::uint64_t seed) {
  Checkpoint ck;
  ck.config_digest = config_digest(model.config());
  ck.stage = stage;
  ck.step = step;
  ck.seed = seed;
  ck.meta = nlohmann::json{{"config", model.config()},
                           {"context_len", model.context_len()},
                           {"optimizer_step", optimizer ? optimizer->step_count() : 0}}
                .dump();
  auto to_blob = [](std::string name, const Shape& shape, const auto& values) {
    Blob b{std::move(name), shape, {}};
    b.values.assign(values.begin(), values.end());
    return b;
  };
  for (const auto& p : model.parameters()) {
    ck.blobs.push_back(to_blob("param/" + p.name, p.value.shape(), p.value.data()));
  }
  if (optimizer) {
    auto& opt = const_cast<AdamW<T>&>(*optimizer);
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
      const auto& p = opt.params()[k];
      ck.blobs.push_back(to_blob("adam.m/" + p.name, p.value.shape(), opt.first_moments()[k]));
      ck.blobs.push_back(to_blob("adam.v/" + p.name, p.value.shape(), opt.second_moments()[k]));
    }
  }
  return ck;
}

inline ModelConfig checkpoint_config(const Checkpoint& ck) {
  try {
    return nlohmann::json::parse(ck.meta).at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          std::string("checkpoint: unreadable metadata: ") + e.what());
  }
}

/// Copies parameters into `model`; the model's configuration digest must match.
template <class T>
void restore_model(VlmModel<T>& model, const Checkpoint& ck) {
  if (ck.config_digest != config_digest(model.config())) {
    throw CheckpointError(CheckpointError::Kind::ConfigMismatch,
                          "checkpoint: config digest does not match the model configuration");
  }
  for (auto& p : model.parameters()) {
    const Blob* b = ck.find("param/" + p.name);
    if (!b || b->shape != p.value.shape()) {
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            "checkpoint: missing or misshapen parameter " + p.name);
    }
    auto dst = p.value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(b->values[i]);
  }
  const auto meta = nlohmann::json::parse(ck.meta);
  model.set_context_len(meta.value("context_len", model.config().max_seq_len));
}

/// Builds a model from the configuration stored in the checkpoint.
template <class T>
VlmModel<T> model_from_checkpoint(const Checkpoint& ck) {
  VlmModel<T> model(checkpoint_config(ck), ck.seed);
  restore_model(model, ck);
  return model;
}

template <class T>
void restore_optimizer(AdamW<T>& opt, const Checkpoint& ck) {
  for (std::size_t k = 0; k < opt.params().size(); ++k) {
    const auto& name = opt.params()[k].name;
    const Blob* m = ck.find("adam.m/" + name);
    const Blob* v = ck.find("adam.v/" + name);
    if (!m || !v) {
      throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint: no moments for " + name);
    }
    opt.first_moments()[k].assign(m->values.begin(), m->values.end());
    opt.second_moments()[k].assign(v->values.begin(), v->values.end());
  }
  opt.set_step_count(nlohmann::json::parse(ck.meta).value("optimizer_step", std::size_t{0}));
}

}  // namespace forge
