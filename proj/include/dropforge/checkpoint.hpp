#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropforge/config.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/io_util.hpp"
#include "dropforge/rng.hpp"
#include "dropforge/tensor.hpp"

namespace dropforge {

// Immutable after load; shareable across threads. Norm weights are stored
// as 1 x d matrices.
template <typename T>
struct CheckpointT {
  ModelConfig config;
  std::map<std::string, MatrixT<T>> tensors;

  const MatrixT<T>& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw UsageError("missing tensor: " + name);
    return it->second;
  }
  bool has_tensor(const std::string& name) const { return tensors.count(name) != 0; }
};

using Checkpoint = CheckpointT<float>;

template <typename To, typename From>
CheckpointT<To> checkpoint_cast(const CheckpointT<From>& src) {
  CheckpointT<To> out;
  out.config = src.config;
  for (const auto& [name, m] : src.tensors) {
    MatrixT<To> t(m.rows, m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) t.data[i] = static_cast<To>(m.data[i]);
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

// Random initialization. One xoshiro256** stream (seeded via splitmix64)
// fills projection and embedding tensors in manifest order with values
// uniform in [-1, 1) scaled by 1 / sqrt(fan_in), fan_in being the input
// width (the trailing shape dimension). Norm weights are set to 1 and
// consume no draws. Integer-and-IEEE arithmetic only, so any
// implementation of the same generator reproduces the bytes exactly.
inline Checkpoint init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  Xoshiro256 rng(seed);
  for (const TensorSpec& spec : tensor_manifest(config)) {
    if (spec.shape.size() == 1) {
      Matrix w(1, spec.shape[0]);
      for (auto& v : w.data) v = 1.0f;
      ckpt.tensors.emplace(spec.name, std::move(w));
      continue;
    }
    Matrix w(spec.shape[0], spec.shape[1]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.shape.back()));
    for (auto& v : w.data) v = static_cast<float>(rng.next_symmetric() * scale);
    ckpt.tensors.emplace(spec.name, std::move(w));
  }
  return ckpt;
}

namespace detail {

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void append_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'D', 'R', 'O', 'P', 'C', 'K', 'P', 'T'};

// File layout: 8 magic bytes "DROPCKPT", an unsigned 64-bit little-endian
// header length, a UTF-8 JSON header {config, tensors: [{name, shape,
// dtype, offset, byte_length}]}, then the raw blob of little-endian f32
// values. Offsets are relative to the start of the blob.
inline std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  ckpt.config.validate();
  const auto manifest = tensor_manifest(ckpt.config);

  nlohmann::json tensors_json = nlohmann::json::array();
  std::string blob;
  std::uint64_t offset = 0;
  for (const TensorSpec& spec : manifest) {
    auto it = ckpt.tensors.find(spec.name);
    if (it == ckpt.tensors.end()) throw InputError("checkpoint missing tensor: " + spec.name);
    const Matrix& m = it->second;
    if (m.numel() != spec.numel())
      throw ShapeError("checkpoint tensor " + spec.name + " has wrong element count");
    nlohmann::json t;
    t["name"] = spec.name;
    t["shape"] = spec.shape;
    t["dtype"] = "f32";
    t["offset"] = offset;
    t["byte_length"] = static_cast<std::uint64_t>(m.numel()) * 4;
    tensors_json.push_back(std::move(t));
    for (float v : m.data) detail::append_f32_le(blob, v);
    offset += static_cast<std::uint64_t>(m.numel()) * 4;
  }
  // Extra tensors are a corruption signal, not data to silently carry.
  if (ckpt.tensors.size() != manifest.size())
    throw InputError("checkpoint holds tensors not implied by its config");

  nlohmann::json header;
  header["config"] = config_to_json(ckpt.config);
  header["tensors"] = std::move(tensors_json);
  const std::string header_str = header.dump();

  std::string out;
  out.reserve(16 + header_str.size() + blob.size());
  out.append(kCheckpointMagic, 8);
  detail::append_u64_le(out, header_str.size());
  out += header_str;
  out += blob;
  return out;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  atomic_write_file(path, checkpoint_to_bytes(ckpt));
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw InputError("not a checkpoint file (bad magic)");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = detail::read_u64_le(base + 8);
  if (16 + header_len > bytes.size()) throw InputError("checkpoint header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  const auto manifest = tensor_manifest(ckpt.config);
  const auto& tensors_json = header.at("tensors");
  if (tensors_json.size() != manifest.size())
    throw InputError("checkpoint manifest does not match config");

  const std::size_t blob_start = 16 + header_len;
  for (std::size_t idx = 0; idx < manifest.size(); ++idx) {
    const TensorSpec& spec = manifest[idx];
    const auto& t = tensors_json[idx];
    if (t.at("name").get<std::string>() != spec.name)
      throw InputError("checkpoint manifest order mismatch at " + spec.name);
    if (t.at("dtype").get<std::string>() != "f32")
      throw InputError("unsupported dtype for " + spec.name);
    if (t.at("shape").get<std::vector<std::int64_t>>() != spec.shape)
      throw InputError("checkpoint tensor " + spec.name + " has unexpected shape");
    const std::uint64_t offset = t.at("offset").get<std::uint64_t>();
    const std::uint64_t byte_len = t.at("byte_length").get<std::uint64_t>();
    if (byte_len != static_cast<std::uint64_t>(spec.numel()) * 4)
      throw InputError("checkpoint tensor " + spec.name + " has wrong byte length");
    if (blob_start + offset + byte_len > bytes.size())
      throw InputError("checkpoint blob truncated at " + spec.name);

    Matrix m(spec.shape.size() == 1 ? 1 : spec.shape[0],
             spec.shape.size() == 1 ? spec.shape[0] : spec.shape[1]);
    const unsigned char* src = base + blob_start + offset;
    for (std::int64_t i = 0; i < m.numel(); ++i)
      m.data[static_cast<std::size_t>(i)] = detail::read_f32_le(src + 4 * i);
    if (!m.all_finite()) throw InputError("checkpoint tensor " + spec.name + " has non-finite values");
    ckpt.tensors.emplace(spec.name, std::move(m));
  }
  return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_bytes(read_file_bytes(path));
}

}  // namespace dropforge
