#pragma once

// Spatial transformer: backward-mapping trilinear warp with clamp-to-edge.
//   out(x) = src(x + u(x) / spacing)
// Displacements u are in mm. The kernels work on planar component buffers
// (u_x, u_y, u_z each of voxel-count length) so they serve both the
// volume-level API and the autodiff op.

#include <array>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "rmsynth/volume.hpp"

namespace rmsynth {

/// Per-voxel sample plan: the lower corner of the interpolation cell, the
/// fractional offsets, and which axes were clamped (zero spatial gradient).
template <class T>
struct WarpContext {
  Index3 dims{};
  std::array<T, 3> inv_spacing{};
  std::vector<std::size_t> base;
  std::vector<std::array<T, 3>> frac;
  std::vector<std::uint8_t> clamped;  // bit a set when axis a fell outside [0, n-1]

  WarpContext(const Index3& d, const Vec3f& spacing, std::span<const T> ux, std::span<const T> uy,
              std::span<const T> uz)
      : dims(d) {
    for (int a = 0; a < 3; ++a) inv_spacing[a] = T(1) / static_cast<T>(spacing[a]);
    const std::size_t n = static_cast<std::size_t>(d[0]) * d[1] * d[2];
    if (ux.size() != n || uy.size() != n || uz.size() != n)
      throw std::invalid_argument("warp: displacement size does not match grid");
    base.resize(n);
    frac.resize(n);
    clamped.assign(n, 0);
    const std::span<const T> u[3] = {ux, uy, uz};
    std::size_t v = 0;
    for (int k = 0; k < d[2]; ++k)
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i, ++v) {
          const int idx[3] = {i, j, k};
          int lo[3];
          for (int a = 0; a < 3; ++a) {
            T p = static_cast<T>(idx[a]) + u[a][v] * inv_spacing[a];
            const T hi = static_cast<T>(d[a] - 1);
            if (p < T(0) || p > hi) {
              clamped[v] |= std::uint8_t(1u << a);
              p = p < T(0) ? T(0) : hi;
            }
            int l = static_cast<int>(std::floor(p));
            if (l > d[a] - 2) l = d[a] - 2;
            lo[a] = l;
            frac[v][a] = p - static_cast<T>(l);
          }
          base[v] = (static_cast<std::size_t>(lo[2]) * d[1] + lo[1]) * d[0] + lo[0];
        }
  }

  std::size_t size() const { return base.size(); }

  std::array<std::size_t, 8> corners(std::size_t v) const {
    const std::size_t sx = 1, sy = static_cast<std::size_t>(dims[0]),
                      sz = static_cast<std::size_t>(dims[0]) * dims[1];
    const std::size_t b = base[v];
    return {b, b + sx, b + sy, b + sy + sx, b + sz, b + sz + sx, b + sz + sy, b + sz + sy + sx};
  }
};

template <class T, class S>
void warp_forward_kernel(const WarpContext<T>& ctx, std::span<const S> src, std::span<S> out) {
  for (std::size_t v = 0; v < ctx.size(); ++v) {
    const auto c = ctx.corners(v);
    const auto& t = ctx.frac[v];
    const T x0 = T(1) - t[0], y0 = T(1) - t[1], z0 = T(1) - t[2];
    const T r00 = x0 * src[c[0]] + t[0] * src[c[1]];
    const T r10 = x0 * src[c[2]] + t[0] * src[c[3]];
    const T r01 = x0 * src[c[4]] + t[0] * src[c[5]];
    const T r11 = x0 * src[c[6]] + t[0] * src[c[7]];
    out[v] = static_cast<S>(z0 * (y0 * r00 + t[1] * r10) + t[2] * (y0 * r01 + t[1] * r11));
  }
}

/// Accumulates gradients of the warp into grad_src and grad_u{x,y,z} (mm).
template <class T>
void warp_backward_kernel(const WarpContext<T>& ctx, std::span<const T> src, std::span<const T> upstream,
                          std::span<T> grad_src, std::span<T> gux, std::span<T> guy, std::span<T> guz) {
  const bool want_src = !grad_src.empty(), want_u = !gux.empty();
  for (std::size_t v = 0; v < ctx.size(); ++v) {
    const T g = upstream[v];
    if (g == T(0)) continue;
    const auto c = ctx.corners(v);
    const auto& t = ctx.frac[v];
    const T x0 = T(1) - t[0], y0 = T(1) - t[1], z0 = T(1) - t[2];
    if (want_src) {
      grad_src[c[0]] += g * x0 * y0 * z0;
      grad_src[c[1]] += g * t[0] * y0 * z0;
      grad_src[c[2]] += g * x0 * t[1] * z0;
      grad_src[c[3]] += g * t[0] * t[1] * z0;
      grad_src[c[4]] += g * x0 * y0 * t[2];
      grad_src[c[5]] += g * t[0] * y0 * t[2];
      grad_src[c[6]] += g * x0 * t[1] * t[2];
      grad_src[c[7]] += g * t[0] * t[1] * t[2];
    }
    if (want_u) {
      const T s[8] = {src[c[0]], src[c[1]], src[c[2]], src[c[3]],
                      src[c[4]], src[c[5]], src[c[6]], src[c[7]]};
      const std::uint8_t cl = ctx.clamped[v];
      if (!(cl & 1u)) {
        const T d = y0 * z0 * (s[1] - s[0]) + t[1] * z0 * (s[3] - s[2]) + y0 * t[2] * (s[5] - s[4]) +
                    t[1] * t[2] * (s[7] - s[6]);
        gux[v] += g * d * ctx.inv_spacing[0];
      }
      if (!(cl & 2u)) {
        const T d = x0 * z0 * (s[2] - s[0]) + t[0] * z0 * (s[3] - s[1]) + x0 * t[2] * (s[6] - s[4]) +
                    t[0] * t[2] * (s[7] - s[5]);
        guy[v] += g * d * ctx.inv_spacing[1];
      }
      if (!(cl & 4u)) {
        const T d = x0 * y0 * (s[4] - s[0]) + t[0] * y0 * (s[5] - s[1]) + x0 * t[1] * (s[6] - s[2]) +
                    t[0] * t[1] * (s[7] - s[3]);
        guz[v] += g * d * ctx.inv_spacing[2];
      }
    }
  }
}

namespace detail {
template <class T>
std::array<std::vector<T>, 3> planar_components(const VectorField& phi) {
  std::array<std::vector<T>, 3> u;
  for (auto& c : u) c.resize(phi.size());
  for (std::size_t v = 0; v < phi.size(); ++v)
    for (int a = 0; a < 3; ++a) u[a][v] = static_cast<T>(phi[v][a]);
  return u;
}
}  // namespace detail

inline ScalarVolume warp_volume(const ScalarVolume& v, const VectorField& phi) {
  require_same_grid(v.meta(), phi.meta(), "warp_volume");
  const auto u = detail::planar_components<double>(phi);
  const WarpContext<double> ctx(v.dims(), v.meta().spacing, u[0], u[1], u[2]);
  std::vector<float> out(v.size());
  warp_forward_kernel<double, float>(ctx, v.data(), out);
  return ScalarVolume(v.meta(), std::move(out));
}

/// Warps a mask by trilinear interpolation of its indicator, keeping voxels
/// whose interpolated value is >= 0.5.
inline Mask warp_mask(const Mask& m, const VectorField& phi) {
  require_same_grid(m.meta(), phi.meta(), "warp_mask");
  std::vector<float> ind(m.size());
  for (std::size_t n = 0; n < m.size(); ++n) ind[n] = m[n] ? 1.f : 0.f;
  const auto warped = warp_volume(ScalarVolume(m.meta(), std::move(ind)), phi);
  std::vector<std::uint8_t> out(m.size());
  for (std::size_t n = 0; n < m.size(); ++n) out[n] = warped[n] >= 0.5f ? 1 : 0;
  return Mask(m.meta(), std::move(out));
}

struct WarpGradients {
  std::vector<double> volume;              // d/d src, voxel order
  std::vector<std::array<double, 3>> field;  // d/d u (per mm), voxel order
};

/// Exact gradients of sum(upstream * warp_volume(v, phi)) with respect to the
/// source intensities and the displacement field (in mm).
inline WarpGradients warp_backward(const ScalarVolume& v, const VectorField& phi,
                                   std::span<const double> upstream) {
  require_same_grid(v.meta(), phi.meta(), "warp_backward");
  if (upstream.size() != v.size()) throw std::invalid_argument("warp_backward: upstream shape mismatch");
  const auto u = detail::planar_components<double>(phi);
  const WarpContext<double> ctx(v.dims(), v.meta().spacing, u[0], u[1], u[2]);
  std::vector<double> src(v.data().begin(), v.data().end());
  std::vector<double> gs(v.size(), 0.0);
  std::array<std::vector<double>, 3> gu;
  for (auto& g : gu) g.assign(v.size(), 0.0);
  warp_backward_kernel<double>(ctx, src, upstream, gs, gu[0], gu[1], gu[2]);
  WarpGradients out{std::move(gs), std::vector<std::array<double, 3>>(v.size())};
  for (std::size_t n = 0; n < v.size(); ++n) out.field[n] = {gu[0][n], gu[1][n], gu[2][n]};
  return out;
}

}  // namespace rmsynth
