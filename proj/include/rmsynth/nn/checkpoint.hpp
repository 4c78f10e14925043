#pragma once

// Checkpoint container, little-endian:
//   "RMCK" | u32 version=1 | u32 n_meta | u32 n_tensors
//   n_meta   x { u32 key_len | key | u32 value_len | value }
//   n_tensors x { u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload }

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "rmsynth/nn/tensor.hpp"
#include "rmsynth/volf.hpp"

namespace rmsynth::nn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  std::string meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw CheckpointError("checkpoint: missing metadata key '" + key + "'");
    return it->second;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out{'R', 'M', 'C', 'K'};
  auto u32 = [&](std::size_t v) { rmsynth::detail::put(out, static_cast<std::uint32_t>(v)); };
  auto str = [&](const std::string& s) {
    u32(s.size());
    out.insert(out.end(), s.begin(), s.end());
  };
  u32(1);
  u32(ck.meta.size());
  u32(ck.tensors.size());
  for (const auto& [k, v] : ck.meta) {
    str(k);
    str(v);
  }
  for (const auto& t : ck.tensors) {
    if (numel(t.shape) != t.data.size()) throw CheckpointError("checkpoint: tensor '" + t.name + "' shape/data mismatch");
    str(t.name);
    u32(t.shape.size());
    for (int d : t.shape) u32(static_cast<std::size_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), p, p + t.data.size() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw CheckpointError("checkpoint: truncated");
  };
  auto u32 = [&]() {
    need(4);
    const auto v = rmsynth::detail::get<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    return v;
  };
  auto str = [&]() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  };
  need(4);
  if (std::memcmp(bytes.data(), "RMCK", 4) != 0) throw CheckpointError("checkpoint: bad magic");
  pos = 4;
  if (u32() != 1) throw CheckpointError("checkpoint: unsupported version");
  const auto n_meta = u32(), n_tensors = u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = str();
    ck.meta[k] = str();
  }
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    StoredTensor t;
    t.name = str();
    const auto rank = u32();
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for '" + t.name + "'");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(static_cast<int>(u32()));
    const auto n = numel(t.shape);
    need(n * sizeof(float));
    t.data.resize(n);
    std::memcpy(t.data.data(), bytes.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
    ck.tensors.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const VolfError& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

template <class T>
void store_params(Checkpoint& ck, const ParamList<T>& params, const std::string& prefix) {
  for (const auto& p : params) {
    std::vector<float> v(p.tensor.data().begin(), p.tensor.data().end());
    ck.tensors.push_back({prefix + p.name, p.tensor.shape(), std::move(v)});
  }
}

/// Copies stored values into existing parameter tensors (shapes must match).
template <class T>
void restore_params(const Checkpoint& ck, ParamList<T>& params, const std::string& prefix) {
  for (auto& p : params) {
    const auto* t = ck.find(prefix + p.name);
    if (!t) throw CheckpointError("checkpoint: missing tensor '" + prefix + p.name + "'");
    if (t->shape != p.tensor.shape())
      throw CheckpointError("checkpoint: shape mismatch for '" + prefix + p.name + "': stored " + shape_str(t->shape) +
                            ", expected " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t->data[i]);
  }
}

}  // namespace rmsynth::nn
