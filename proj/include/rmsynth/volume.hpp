#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rmsynth {

using Index3 = std::array<int, 3>;
using Vec3f = std::array<float, 3>;

// Axis convention: x = left-right, y = anterior-posterior (+y anterior),
// z = superior-inferior (+z superior). Voxel (i,j,k) sits at
// origin + (i,j,k) * spacing.
struct GridMeta {
  Index3 dims{2, 2, 2};
  Vec3f spacing{1.f, 1.f, 1.f};
  Vec3f origin{0.f, 0.f, 0.f};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t offset(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }

  Index3 index_of(std::size_t n) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(n % nx), static_cast<int>((n / nx) % ny),
            static_cast<int>(n / (nx * ny))};
  }

  std::array<double, 3> world(double i, double j, double k) const {
    return {origin[0] + i * spacing[0], origin[1] + j * spacing[1],
            origin[2] + k * spacing[2]};
  }

  double voxel_volume() const {
    return static_cast<double>(spacing[0]) * spacing[1] * spacing[2];
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 2) throw std::invalid_argument("GridMeta: every dimension must be >= 2");
      if (!(spacing[a] > 0.f) || !std::isfinite(spacing[a]))
        throw std::invalid_argument("GridMeta: spacing must be finite and > 0");
      if (!std::isfinite(origin[a])) throw std::invalid_argument("GridMeta: origin must be finite");
    }
  }

  friend bool operator==(const GridMeta&, const GridMeta&) = default;
};

inline bool same_lattice(const GridMeta& a, const GridMeta& b) {
  return a.dims == b.dims && a.spacing == b.spacing;
}

inline void require_same_grid(const GridMeta& a, const GridMeta& b, const char* what) {
  if (!(a == b)) throw std::invalid_argument(std::string(what) + ": grid mismatch");
}

namespace detail {
inline bool finite_value(float v) { return std::isfinite(v); }
inline bool finite_value(std::uint8_t) { return true; }
inline bool finite_value(const Vec3f& v) {
  return std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]);
}
}  // namespace detail

/// Immutable voxel grid: metadata plus an x-fastest flat payload.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  Grid(GridMeta meta, std::vector<T> data) : meta_(meta), data_(std::move(data)) {
    meta_.validate();
    if (data_.size() != meta_.voxel_count())
      throw std::invalid_argument("Grid: payload length does not match dims");
    for (const auto& v : data_)
      if (!detail::finite_value(v)) throw std::invalid_argument("Grid: non-finite value");
  }

  static Grid filled(GridMeta meta, T value) {
    return Grid(meta, std::vector<T>(meta.voxel_count(), value));
  }

  // Builds a grid by evaluating f(i, j, k) at every voxel.
  template <class F>
  static Grid generate(GridMeta meta, F&& f) {
    meta.validate();
    std::vector<T> data(meta.voxel_count());
    std::size_t n = 0;
    for (int k = 0; k < meta.dims[2]; ++k)
      for (int j = 0; j < meta.dims[1]; ++j)
        for (int i = 0; i < meta.dims[0]; ++i) data[n++] = f(i, j, k);
    return Grid(meta, std::move(data));
  }

  const GridMeta& meta() const { return meta_; }
  const Index3& dims() const { return meta_.dims; }
  std::span<const T> data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  const T& operator()(int i, int j, int k) const { return data_[meta_.offset(i, j, k)]; }
  const T& operator[](std::size_t n) const { return data_[n]; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  GridMeta meta_{};
  std::vector<T> data_;
};

using ScalarVolume = Grid<float>;
using VectorField = Grid<Vec3f>;
using Mask = Grid<std::uint8_t>;

inline std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

inline VectorField zero_field(const GridMeta& meta) { return VectorField::filled(meta, Vec3f{0.f, 0.f, 0.f}); }

// Trilinear sample at fractional voxel coordinates with clamp-to-edge.
inline double sample_trilinear(const ScalarVolume& v, double x, double y, double z) {
  const auto& d = v.dims();
  const double p[3] = {std::clamp(x, 0.0, d[0] - 1.0), std::clamp(y, 0.0, d[1] - 1.0),
                       std::clamp(z, 0.0, d[2] - 1.0)};
  int i0[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    i0[a] = std::min(static_cast<int>(std::floor(p[a])), d[a] - 2);
    t[a] = p[a] - i0[a];
  }
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const double w = (dx ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dz ? t[2] : 1 - t[2]);
    if (w != 0.0) acc += w * v(i0[0] + dx, i0[1] + dy, i0[2] + dz);
  }
  return acc;
}

/// Resamples onto new_dims with the corner voxels pinned, so the physical
/// extent (n-1)*spacing is preserved.
inline ScalarVolume resample_trilinear(const ScalarVolume& v, const Index3& new_dims) {
  for (int a = 0; a < 3; ++a)
    if (new_dims[a] < 2) throw std::invalid_argument("resample_trilinear: dims must be >= 2");
  const auto& src = v.meta();
  GridMeta out = src;
  out.dims = new_dims;
  double scale[3];
  for (int a = 0; a < 3; ++a) {
    scale[a] = static_cast<double>(src.dims[a] - 1) / (new_dims[a] - 1);
    out.spacing[a] = static_cast<float>(src.spacing[a] * scale[a]);
  }
  if (new_dims == src.dims) return v;
  return ScalarVolume::generate(out, [&](int i, int j, int k) {
    return static_cast<float>(sample_trilinear(v, i * scale[0], j * scale[1], k * scale[2]));
  });
}

struct CropResult {
  ScalarVolume volume;
  GridMeta meta;   // grid of the cropped volume, origin moved to the crop corner
  Index3 offset;   // first voxel of the crop in the source grid
};

/// Crops v to the bounding box of m dilated by margin_mm (rounded up to whole
/// voxels per axis) and clipped to the volume.
inline CropResult crop_bbox(const ScalarVolume& v, const Mask& m, double margin_mm) {
  require_same_grid(v.meta(), m.meta(), "crop_bbox");
  if (margin_mm < 0) throw std::invalid_argument("crop_bbox: negative margin");
  const auto& meta = v.meta();
  Index3 lo{meta.dims[0], meta.dims[1], meta.dims[2]}, hi{-1, -1, -1};
  for (std::size_t n = 0; n < m.size(); ++n) {
    if (!m[n]) continue;
    const auto idx = meta.index_of(n);
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], idx[a]);
      hi[a] = std::max(hi[a], idx[a]);
    }
  }
  if (hi[0] < 0) throw std::invalid_argument("crop_bbox: empty mask");
  GridMeta out = meta;
  for (int a = 0; a < 3; ++a) {
    const int pad = static_cast<int>(std::ceil(margin_mm / meta.spacing[a] - 1e-9));
    lo[a] = std::max(0, lo[a] - pad);
    hi[a] = std::min(meta.dims[a] - 1, hi[a] + pad);
    out.dims[a] = hi[a] - lo[a] + 1;
    out.origin[a] = static_cast<float>(meta.origin[a] + lo[a] * static_cast<double>(meta.spacing[a]));
  }
  // A one-voxel extent cannot form a valid grid; grow it inside the volume.
  for (int a = 0; a < 3; ++a) {
    if (out.dims[a] >= 2) continue;
    if (hi[a] + 1 < meta.dims[a]) ++hi[a]; else --lo[a];
    out.dims[a] = 2;
    out.origin[a] = static_cast<float>(meta.origin[a] + lo[a] * static_cast<double>(meta.spacing[a]));
  }
  auto cropped = ScalarVolume::generate(out, [&](int i, int j, int k) {
    return v(i + lo[0], j + lo[1], k + lo[2]);
  });
  return {std::move(cropped), out, lo};
}

}  // namespace rmsynth
