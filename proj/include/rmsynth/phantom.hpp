#pragma once

// Analytic breathing chest phantom.
//
// Geometry at end-of-exhale (alpha = 0): an elliptic body cylinder along z,
// two lungs (ellipsoids truncated below by a flat diaphragm at z_d) and a
// spherical tumor inside one lung. Motion is a backward map
//   phi_alpha(p) = alpha * psi(p),
// so phase alpha is defined as I_alpha(p) = I_0(p + phi_alpha(p)).
//  - SI: inside the vertical column over each lung footprint,
//        psi_z = w(z) = clamp((z_apex - z) / (z_apex - z_d), 0, 1).
//        Outside the columns psi_z = 0, which makes the lung / chest-wall
//        boundary a sliding interface.
//  - AP: psi_y = -c_AP * v(y), with v a smoothstep from 0 at ap_onset_y to 1
//        at the anterior body surface, so the anterior wall moves outward.
// Anything the columns carry (lung parenchyma, tumor, abdomen below the
// diaphragm) follows psi; the tumor is advected with the local lung field.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "rmsynth/volume.hpp"

namespace rmsynth {

using Point3 = std::array<double, 3>;

struct Ellipsoid {
  Point3 center{};
  Point3 semi_axes{};

  double level(const Point3& p) const {
    double s = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / semi_axes[a];
      s += d * d;
    }
    return s;
  }
  bool footprint_contains(double x, double y) const {
    const double dx = (x - center[0]) / semi_axes[0], dy = (y - center[1]) / semi_axes[1];
    return dx * dx + dy * dy <= 1.0;
  }
  double apex_z() const { return center[2] + semi_axes[2]; }
};

struct PhantomParams {
  GridMeta grid;
  std::array<double, 2> body_semi_axes{85.0, 75.0};  // x, y of the body cylinder
  std::array<Ellipsoid, 2> lungs{Ellipsoid{{-40.0, -10.0, 10.0}, {28.0, 42.0, 60.0}},
                                 Ellipsoid{{40.0, -10.0, 10.0}, {28.0, 42.0, 60.0}}};
  double diaphragm_z = -20.0;
  Point3 tumor_center{-40.0, -12.0, 15.0};
  double tumor_radius = 15.0;
  double tumor_intensity = 50.0;
  double lung_intensity = -750.0;
  double body_intensity = 0.0;
  double background_intensity = -1000.0;
  double d_max = 20.0;
  double c_ap = 0.15;
  double ap_onset_y = 40.0;  // AP motion is zero posterior of this plane
  double edge_width_mm = 6.0;  // soft-edge half width, one voxel by default
  std::uint64_t seed = 0;

  /// Cubic grid of `size` voxels covering fov_mm, centered on the origin.
  static GridMeta cubic_grid(int size, double fov_mm = 192.0) {
    GridMeta g;
    const float s = static_cast<float>(fov_mm / size);
    const float o = static_cast<float>(-(size - 1) * 0.5 * s);
    g.dims = {size, size, size};
    g.spacing = {s, s, s};
    g.origin = {o, o, o};
    return g;
  }

  static PhantomParams standard(int size) {
    PhantomParams p;
    p.grid = cubic_grid(size);
    p.edge_width_mm = p.grid.spacing[0];
    p.validate();
    return p;
  }

  /// Seeded anatomical variation around the standard phantom.
  static PhantomParams sample(int size, std::uint64_t seed) {
    PhantomParams p = standard(size);
    p.seed = seed;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    p.body_semi_axes[0] += 4.0 * u(rng);
    p.body_semi_axes[1] += 3.0 * u(rng);
    for (auto& l : p.lungs) {
      l.center[0] += (l.center[0] < 0 ? -1.0 : 1.0) * 3.0 * u(rng);
      l.center[2] += 4.0 * u(rng);
      l.semi_axes[0] += 2.0 * u(rng);
      l.semi_axes[2] += 6.0 * u(rng);
    }
    p.diaphragm_z += 5.0 * u(rng);
    const int side = u(rng) < 0 ? 0 : 1;
    const auto& host = p.lungs[side];
    const double base_radius = p.tumor_radius;
    const Point3 base_center = {host.center[0], host.center[1], host.center[2]};
    for (int attempt = 0;; ++attempt) {
      p.tumor_radius = base_radius + 2.0 * u(rng);
      p.tumor_center = {host.center[0] + 6.0 * u(rng), host.center[1] + 10.0 * u(rng),
                        host.center[2] + 12.0 * u(rng)};
      if (p.tumor_fits()) break;
      if (attempt == 64) {
        p.tumor_radius = base_radius;
        p.tumor_center = base_center;
        break;
      }
    }
    p.d_max = 20.0 + 4.0 * u(rng);
    p.c_ap = 0.15 + 0.03 * u(rng);
    p.validate();
    return p;
  }

  void validate() const {
    grid.validate();
    if (!(d_max > 0)) throw std::invalid_argument("PhantomParams: d_max must be > 0");
    if (!(c_ap >= 0 && c_ap < 0.2)) throw std::invalid_argument("PhantomParams: c_AP must lie in [0, 0.2)");
    const double vals[4] = {tumor_intensity, lung_intensity, body_intensity, background_intensity};
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        if (vals[a] == vals[b]) throw std::invalid_argument("PhantomParams: intensities must be distinct");
    for (const auto& l : lungs) {
      if (l.center[1] + l.semi_axes[1] >= ap_onset_y)
        throw std::invalid_argument("PhantomParams: lungs reach into the AP motion band");
      if (diaphragm_z <= l.center[2] - l.semi_axes[2] || diaphragm_z >= l.apex_z())
        throw std::invalid_argument("PhantomParams: diaphragm must cut both lungs");
      if (d_max >= l.apex_z() - diaphragm_z)
        throw std::invalid_argument("PhantomParams: d_max exceeds lung height (folding)");
    }
    if (ap_onset_y >= body_semi_axes[1]) throw std::invalid_argument("PhantomParams: AP band outside body");
    if (!tumor_fits()) throw std::invalid_argument("PhantomParams: tumor must lie strictly inside one lung");
  }

  // Tumor sphere strictly inside one lung, checked by probing its surface.
  bool tumor_fits() const {
    for (const auto& l : lungs) {
      bool ok = l.level(tumor_center) < 1.0;
      for (int a = 0; ok && a < 24; ++a)
        for (int b = 0; ok && b <= 12; ++b) {
          const double th = 2 * std::numbers::pi * a / 24, ph = std::numbers::pi * b / 12;
          const Point3 q{tumor_center[0] + tumor_radius * std::sin(ph) * std::cos(th),
                         tumor_center[1] + tumor_radius * std::sin(ph) * std::sin(th),
                         tumor_center[2] + tumor_radius * std::cos(ph)};
          ok = l.level(q) < 1.0 && q[2] > diaphragm_z;
        }
      if (ok) return true;
    }
    return false;
  }

  // --- analytic model -------------------------------------------------------

  bool in_body(const Point3& p) const {
    const double dx = p[0] / body_semi_axes[0], dy = p[1] / body_semi_axes[1];
    return dx * dx + dy * dy <= 1.0;
  }
  bool in_lung(const Point3& p) const {
    if (p[2] < diaphragm_z) return false;
    for (const auto& l : lungs)
      if (l.level(p) <= 1.0) return true;
    return false;
  }
  bool in_tumor(const Point3& p) const {
    double s = 0;
    for (int a = 0; a < 3; ++a) s += (p[a] - tumor_center[a]) * (p[a] - tumor_center[a]);
    return s <= tumor_radius * tumor_radius;
  }

  // Approximate signed distances (mm, negative inside) used for soft edges.
  double body_distance(const Point3& p) const {
    const double ax = body_semi_axes[0], ay = body_semi_axes[1];
    const double level = (p[0] * p[0]) / (ax * ax) + (p[1] * p[1]) / (ay * ay);
    const double grad = 2.0 * std::sqrt(p[0] * p[0] / (ax * ax * ax * ax) + p[1] * p[1] / (ay * ay * ay * ay));
    return (level - 1.0) / std::max(grad, 1e-9);
  }
  double lung_distance(const Point3& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& l : lungs) {
      double g2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double s = l.semi_axes[a] * l.semi_axes[a];
        g2 += (p[a] - l.center[a]) * (p[a] - l.center[a]) / (s * s);
      }
      const double d = (l.level(p) - 1.0) / std::max(2.0 * std::sqrt(g2), 1e-9);
      best = std::min(best, std::max(d, diaphragm_z - p[2]));
    }
    return best;
  }
  double tumor_distance(const Point3& p) const {
    double s = 0;
    for (int a = 0; a < 3; ++a) s += (p[a] - tumor_center[a]) * (p[a] - tumor_center[a]);
    return std::sqrt(s) - tumor_radius;
  }

  // Partial-volume occupancy: 1 inside, 0 outside, smoothstep across
  // [-edge_width, +edge_width] around the surface.
  double occupancy(double signed_distance) const {
    if (edge_width_mm <= 0.0) return signed_distance <= 0.0 ? 1.0 : 0.0;
    const double t = std::clamp(0.5 - signed_distance / (2.0 * edge_width_mm), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
  }

  double eoe_intensity(const Point3& p) const {
    const double body = occupancy(body_distance(p));
    if (body == 0.0) return background_intensity;
    const double lung = occupancy(lung_distance(p));
    const double tumor = occupancy(tumor_distance(p));
    const double tissue = body_intensity + (lung_intensity - body_intensity) * lung;
    const double inner = tissue + (tumor_intensity - tissue) * tumor;
    return background_intensity + (inner - background_intensity) * body;
  }

  /// SI weight inside the column over lung l: 1 at and below the diaphragm,
  /// 0 at and above the lung apex, linear in between.
  double si_weight(int l, double z) const {
    const double apex = lungs[l].apex_z();
    return std::clamp((apex - z) / (apex - diaphragm_z), 0.0, 1.0);
  }

  double ap_profile(double y) const {
    const double t = std::clamp((y - ap_onset_y) / (body_semi_axes[1] - ap_onset_y), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
  }

  /// Displacement (mm) at p for amplitude alpha; linear in alpha.
  Point3 displacement(const Point3& p, double alpha) const {
    Point3 d{0.0, -c_ap * alpha * ap_profile(p[1]), 0.0};
    for (int l = 0; l < 2; ++l)
      if (lungs[l].footprint_contains(p[0], p[1])) {
        d[2] = alpha * si_weight(l, p[2]);
        break;
      }
    return d;
  }

  Point3 source_point(const Point3& p, double alpha) const {
    const auto d = displacement(p, alpha);
    return {p[0] + d[0], p[1] + d[1], p[2] + d[2]};
  }

  void check_alpha(double alpha) const {
    if (!(alpha >= 0.0 && alpha <= d_max)) throw std::invalid_argument("phantom: alpha outside [0, d_max]");
  }
};

/// Oracle backward-mapping DVF for amplitude alpha.
inline VectorField oracle_dvf(const PhantomParams& p, double alpha) {
  p.check_alpha(alpha);
  return VectorField::generate(p.grid, [&](int i, int j, int k) {
    const auto d = p.displacement(p.grid.world(i, j, k), alpha);
    return Vec3f{static_cast<float>(d[0]), static_cast<float>(d[1]), static_cast<float>(d[2])};
  });
}

/// Phase image at amplitude alpha: soft-edged shapes box-filtered by 2x2x2
/// supersampling.
inline ScalarVolume render_phase(const PhantomParams& p, double alpha) {
  p.check_alpha(alpha);
  return ScalarVolume::generate(p.grid, [&](int i, int j, int k) {
    double acc = 0.0;
    for (int s = 0; s < 8; ++s) {
      const auto q = p.grid.world(i + ((s & 1) ? 0.25 : -0.25), j + ((s & 2) ? 0.25 : -0.25),
                                  k + ((s & 4) ? 0.25 : -0.25));
      acc += p.eoe_intensity(p.source_point(q, alpha));
    }
    return static_cast<float>(acc / 8.0);
  });
}

enum class Structure { Tumor, Lungs, Body };

/// Voxel-center indicator of a structure at amplitude alpha.
inline Mask render_mask(const PhantomParams& p, double alpha, Structure s) {
  p.check_alpha(alpha);
  return Mask::generate(p.grid, [&](int i, int j, int k) -> std::uint8_t {
    const auto q = p.source_point(p.grid.world(i, j, k), alpha);
    switch (s) {
      case Structure::Tumor: return p.in_tumor(q);
      case Structure::Lungs: return p.in_lung(q);
      case Structure::Body: return p.in_body(q);
    }
    return 0;
  });
}

struct PhaseMasks {
  Mask tumor, lungs, body;
};

struct PhantomDataset {
  PhantomParams params;
  std::vector<double> amplitudes;  // mm, strictly increasing from 0
  std::vector<ScalarVolume> phases;
  std::vector<VectorField> dvfs;  // backward maps from phase 0 to phase k
  std::vector<PhaseMasks> masks;

  std::size_t n_gates() const { return amplitudes.size(); }
};

/// Half-cosine breathing profile from EOE (0) to EOI (d_max).
inline std::vector<double> breathing_amplitudes(double d_max, int n_gates) {
  if (n_gates < 2) throw std::invalid_argument("breathing_amplitudes: need at least 2 gates");
  std::vector<double> a(n_gates);
  for (int k = 0; k < n_gates; ++k)
    a[k] = d_max * 0.5 * (1.0 - std::cos(std::numbers::pi * k / (n_gates - 1)));
  a.front() = 0.0;
  a.back() = d_max;
  return a;
}

inline PhaseMasks render_masks(const PhantomParams& p, double alpha) {
  return {render_mask(p, alpha, Structure::Tumor), render_mask(p, alpha, Structure::Lungs),
          render_mask(p, alpha, Structure::Body)};
}

inline PhantomDataset generate_dataset(const PhantomParams& p, int n_gates) {
  p.validate();
  PhantomDataset ds;
  ds.params = p;
  ds.amplitudes = breathing_amplitudes(p.d_max, n_gates);
  for (double a : ds.amplitudes) {
    ds.phases.push_back(render_phase(p, a));
    ds.dvfs.push_back(oracle_dvf(p, a));
    ds.masks.push_back(render_masks(p, a));
  }
  return ds;
}

}  // namespace rmsynth
