#pragma once

// VOLF container, little-endian:
//   "VOLF" | u32 version=1 | u8 dtype (0=f32, 1=u8) | u8 ncomp (1|3) | u16 reserved=0
//   | u32 dims[3] | f32 spacing[3] | f32 origin[3] | payload
// The payload holds dims-product * ncomp elements, x fastest, then y, then z;
// vector components are interleaved per voxel.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "rmsynth/volume.hpp"

namespace rmsynth {

static_assert(std::endian::native == std::endian::little, "VOLF I/O assumes a little-endian host");

inline constexpr std::size_t kVolfHeaderBytes = 48;
inline constexpr std::uint32_t kVolfVersion = 1;

class VolfError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, BadHeader, Truncated, LengthMismatch, NonFinite };

  VolfError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

using AnyVolume = std::variant<ScalarVolume, VectorField, Mask>;

namespace detail {

template <class T>
void put(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline void put_header(std::vector<std::uint8_t>& out, const GridMeta& m, std::uint8_t dtype,
                       std::uint8_t ncomp) {
  out.insert(out.end(), {'V', 'O', 'L', 'F'});
  put(out, kVolfVersion);
  put(out, dtype);
  put(out, ncomp);
  put(out, std::uint16_t{0});
  for (int d : m.dims) put(out, static_cast<std::uint32_t>(d));
  for (float s : m.spacing) put(out, s);
  for (float o : m.origin) put(out, o);
}

template <class T> struct VolfTraits;
template <> struct VolfTraits<float> { static constexpr std::uint8_t dtype = 0, ncomp = 1; };
template <> struct VolfTraits<Vec3f> { static constexpr std::uint8_t dtype = 0, ncomp = 3; };
template <> struct VolfTraits<std::uint8_t> { static constexpr std::uint8_t dtype = 1, ncomp = 1; };

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_volf(const Grid<T>& g) {
  using Tr = detail::VolfTraits<T>;
  std::vector<std::uint8_t> out;
  out.reserve(kVolfHeaderBytes + g.size() * sizeof(T));
  detail::put_header(out, g.meta(), Tr::dtype, Tr::ncomp);
  const auto* p = reinterpret_cast<const std::uint8_t*>(g.data().data());
  out.insert(out.end(), p, p + g.size() * sizeof(T));
  return out;
}

inline std::vector<std::uint8_t> encode_volf(const AnyVolume& v) {
  return std::visit([](const auto& g) { return encode_volf(g); }, v);
}

inline AnyVolume decode_volf(std::span<const std::uint8_t> bytes) {
  using K = VolfError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "VOLF", 4) != 0)
    throw VolfError(K::BadMagic, "VOLF: bad magic");
  if (bytes.size() < kVolfHeaderBytes) throw VolfError(K::Truncated, "VOLF: truncated header");
  const auto* p = bytes.data();
  if (detail::get<std::uint32_t>(p + 4) != kVolfVersion)
    throw VolfError(K::BadVersion, "VOLF: unsupported version");
  const std::uint8_t dtype = p[8], ncomp = p[9];
  const bool ok_kind = (dtype == 0 && (ncomp == 1 || ncomp == 3)) || (dtype == 1 && ncomp == 1);
  if (!ok_kind || detail::get<std::uint16_t>(p + 10) != 0)
    throw VolfError(K::BadHeader, "VOLF: unsupported dtype/ncomp/reserved combination");
  GridMeta meta;
  for (int a = 0; a < 3; ++a) {
    const auto d = detail::get<std::uint32_t>(p + 12 + 4 * a);
    if (d < 2 || d > (1u << 16)) throw VolfError(K::BadHeader, "VOLF: dims out of range");
    meta.dims[a] = static_cast<int>(d);
    meta.spacing[a] = detail::get<float>(p + 24 + 4 * a);
    meta.origin[a] = detail::get<float>(p + 36 + 4 * a);
  }
  try {
    meta.validate();
  } catch (const std::invalid_argument& e) {
    throw VolfError(K::BadHeader, std::string("VOLF: ") + e.what());
  }
  const std::size_t elem = dtype == 0 ? 4 : 1;
  const std::size_t expected = meta.voxel_count() * ncomp * elem;
  const std::size_t have = bytes.size() - kVolfHeaderBytes;
  if (have < expected) throw VolfError(K::Truncated, "VOLF: truncated payload");
  if (have > expected) throw VolfError(K::LengthMismatch, "VOLF: payload longer than dims imply");
  const auto* payload = p + kVolfHeaderBytes;

  auto build = [&](auto tag) -> AnyVolume {
    using T = decltype(tag);
    std::vector<T> data(meta.voxel_count());
    std::memcpy(data.data(), payload, expected);
    for (const auto& v : data)
      if (!detail::finite_value(v)) throw VolfError(K::NonFinite, "VOLF: non-finite payload value");
    return Grid<T>(meta, std::move(data));
  };
  if (dtype == 1) return build(std::uint8_t{});
  if (ncomp == 3) return build(Vec3f{});
  return build(float{});
}

template <class T>
void save_volume(const Grid<T>& g, const std::filesystem::path& path) {
  const auto bytes = encode_volf(g);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw VolfError(VolfError::Kind::Io, "cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw VolfError(VolfError::Kind::Io, "write failed: " + path.string());
}

inline void save_volume(const AnyVolume& v, const std::filesystem::path& path) {
  std::visit([&](const auto& g) { save_volume(g, path); }, v);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw VolfError(VolfError::Kind::Io, "cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline AnyVolume load_volume(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_volf(bytes);
  } catch (const VolfError& e) {
    throw VolfError(e.kind(), std::string(e.what()) + " (" + path.string() + ")");
  }
}

// Typed load; throws VolfError(BadHeader) when the file holds another kind.
template <class T>
Grid<T> load_as(const std::filesystem::path& path) {
  auto any = load_volume(path);
  if (auto* g = std::get_if<Grid<T>>(&any)) return std::move(*g);
  throw VolfError(VolfError::Kind::BadHeader, "VOLF: unexpected volume kind in " + path.string());
}

}  // namespace rmsynth
