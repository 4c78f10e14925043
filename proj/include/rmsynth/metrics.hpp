#pragma once

// Evaluation metrics: image agreement (MAE, SSIM), region overlap (Dice,
// centre-of-mass distance, lung volume variation), DVF regularity (total
// variation, Jacobian determinant) and the body-surface amplitude surrogate.

#include <cstdio>
#include <numeric>
#include <ostream>
#include <queue>
#include <string>

#include "rmsynth/volume.hpp"

namespace rmsynth {

inline double mae(const ScalarVolume& a, const ScalarVolume& b) {
  require_same_grid(a.meta(), b.meta(), "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
  return acc / static_cast<double>(a.size());
}

struct SsimOptions {
  int window = 7;
  double sigma = 1.5;
  double dynamic_range = 1050.0;
};

inline std::vector<double> gaussian_window(int window, double sigma) {
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("ssim: window must be odd");
  std::vector<double> w(window);
  const int h = window / 2;
  double s = 0.0;
  for (int i = 0; i < window; ++i) s += w[i] = std::exp(-0.5 * (i - h) * (i - h) / (sigma * sigma));
  for (auto& v : w) v /= s;
  return w;
}

namespace detail {
// Valid-mode separable filtering of a dense (nx, ny, nz) field.
inline std::vector<double> filter_valid(const std::vector<double>& f, Index3 dims, const std::vector<double>& w) {
  const int K = static_cast<int>(w.size());
  std::vector<double> cur = f;
  for (int axis = 0; axis < 3; ++axis) {
    Index3 od = dims;
    od[axis] = dims[axis] - K + 1;
    std::vector<double> out(static_cast<std::size_t>(od[0]) * od[1] * od[2], 0.0);
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(dims[0]) : static_cast<std::size_t>(dims[0]) * dims[1];
    std::size_t o = 0;
    for (int k = 0; k < od[2]; ++k)
      for (int j = 0; j < od[1]; ++j)
        for (int i = 0; i < od[0]; ++i, ++o) {
          const std::size_t base = (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
          double acc = 0.0;
          for (int t = 0; t < K; ++t) acc += w[t] * cur[base + t * stride];
          out[o] = acc;
        }
    cur = std::move(out);
    dims = od;
  }
  return cur;
}
}  // namespace detail

/// Mean local SSIM over every position where the Gaussian window fits.
inline double ssim(const ScalarVolume& a, const ScalarVolume& b, const SsimOptions& opt = {}) {
  require_same_grid(a.meta(), b.meta(), "ssim");
  const auto w = gaussian_window(opt.window, opt.sigma);
  const auto& d = a.dims();
  for (int ax = 0; ax < 3; ++ax)
    if (d[ax] < opt.window) throw std::invalid_argument("ssim: volume smaller than window");
  const std::size_t n = a.size();
  std::vector<double> fa(n), fb(n), faa(n), fbb(n), fab(n);
  for (std::size_t i = 0; i < n; ++i) {
    fa[i] = a[i];
    fb[i] = b[i];
    faa[i] = fa[i] * fa[i];
    fbb[i] = fb[i] * fb[i];
    fab[i] = fa[i] * fb[i];
  }
  const auto ma = detail::filter_valid(fa, d, w), mb = detail::filter_valid(fb, d, w);
  const auto maa = detail::filter_valid(faa, d, w), mbb = detail::filter_valid(fbb, d, w);
  const auto mab = detail::filter_valid(fab, d, w);
  const double c1 = (0.01 * opt.dynamic_range) * (0.01 * opt.dynamic_range);
  const double c2 = (0.03 * opt.dynamic_range) * (0.03 * opt.dynamic_range);
  double acc = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const double va = maa[i] - ma[i] * ma[i], vb = mbb[i] - mb[i] * mb[i], cov = mab[i] - ma[i] * mb[i];
    acc += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(ma.size());
}

/// |V_B - V_A| / V_A * 100.
inline double volume_variation(const Mask& a, const Mask& b) {
  const double va = static_cast<double>(count(a)) * a.meta().voxel_volume();
  const double vb = static_cast<double>(count(b)) * b.meta().voxel_volume();
  if (va == 0.0) throw std::invalid_argument("volume_variation: reference mask is empty");
  return std::abs(vb - va) / va * 100.0;
}

inline double dice(const Mask& a, const Mask& b) {
  require_same_grid(a.meta(), b.meta(), "dice");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    inter += (a[i] != 0) && (b[i] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline std::array<double, 3> center_of_mass(const Mask& m) {
  std::array<double, 3> s{0, 0, 0};
  std::size_t n = 0;
  for (std::size_t v = 0; v < m.size(); ++v) {
    if (!m[v]) continue;
    const auto idx = m.meta().index_of(v);
    for (int a = 0; a < 3; ++a) s[a] += idx[a];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("center_of_mass: empty mask");
  return m.meta().world(s[0] / n, s[1] / n, s[2] / n);
}

/// Euclidean distance (mm) between the voxel-averaged centroids.
inline double com_error(const Mask& a, const Mask& b) {
  const auto ca = center_of_mass(a), cb = center_of_mass(b);
  return std::sqrt((ca[0] - cb[0]) * (ca[0] - cb[0]) + (ca[1] - cb[1]) * (ca[1] - cb[1]) +
                   (ca[2] - cb[2]) * (ca[2] - cb[2]));
}

/// Isotropic TV with forward differences, displacements expressed in voxels,
/// averaged over voxels that have a forward neighbour on every axis.
inline double total_variation(const VectorField& phi) {
  const auto& m = phi.meta();
  const auto& d = m.dims;
  double acc = 0.0;
  std::size_t n = 0;
  for (int k = 0; k + 1 < d[2]; ++k)
    for (int j = 0; j + 1 < d[1]; ++j)
      for (int i = 0; i + 1 < d[0]; ++i) {
        const auto& p = phi(i, j, k);
        const Vec3f* nb[3] = {&phi(i + 1, j, k), &phi(i, j + 1, k), &phi(i, j, k + 1)};
        double s = 0.0;
        for (int c = 0; c < 3; ++c)
          for (int a = 0; a < 3; ++a) {
            const double diff = (static_cast<double>((*nb[a])[c]) - p[c]) / m.spacing[c];
            s += diff * diff;
          }
        acc += std::sqrt(s);
        ++n;
      }
  return acc / static_cast<double>(n);
}

struct JacobianStats {
  double mean_abs_det = 0;
  double nonpositive_fraction = 0;
};

inline double jacobian_det_at(const VectorField& phi, int i, int j, int k) {
  const auto& sp = phi.meta().spacing;
  double J[3][3];
  const Vec3f* fwd[3] = {&phi(i + 1, j, k), &phi(i, j + 1, k), &phi(i, j, k + 1)};
  const Vec3f* bwd[3] = {&phi(i - 1, j, k), &phi(i, j - 1, k), &phi(i, j, k - 1)};
  for (int c = 0; c < 3; ++c)
    for (int a = 0; a < 3; ++a)
      J[c][a] = (c == a ? 1.0 : 0.0) + (static_cast<double>((*fwd[a])[c]) - (*bwd[a])[c]) / (2.0 * sp[a]);
  return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
         J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

/// Determinant of I + grad(phi) by central differences over interior voxels.
inline JacobianStats jacobian_stats(const VectorField& phi) {
  const auto& d = phi.dims();
  if (d[0] < 3 || d[1] < 3 || d[2] < 3) throw std::invalid_argument("jacobian_stats: dims must be >= 3");
  double acc = 0.0;
  std::size_t n = 0, bad = 0;
  for (int k = 1; k + 1 < d[2]; ++k)
    for (int j = 1; j + 1 < d[1]; ++j)
      for (int i = 1; i + 1 < d[0]; ++i) {
        const double det = jacobian_det_at(phi, i, j, k);
        acc += std::abs(det);
        bad += det <= 0.0;
        ++n;
      }
  return {acc / static_cast<double>(n), static_cast<double>(bad) / static_cast<double>(n)};
}

namespace detail {

inline Mask largest_component(const Mask& m) {
  const auto& meta = m.meta();
  const auto& d = meta.dims;
  std::vector<int> label(m.size(), 0);
  std::vector<std::size_t> sizes{0};
  std::queue<std::size_t> q;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m[s] || label[s]) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    label[s] = id;
    q.push(s);
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop();
      ++sizes[id];
      const auto idx = meta.index_of(v);
      for (int a = 0; a < 3; ++a)
        for (int dir : {-1, 1}) {
          auto nb = idx;
          nb[a] += dir;
          if (nb[a] < 0 || nb[a] >= d[a]) continue;
          const auto w = meta.offset(nb[0], nb[1], nb[2]);
          if (m[w] && !label[w]) {
            label[w] = id;
            q.push(w);
          }
        }
    }
  }
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  std::vector<std::uint8_t> out(m.size());
  for (std::size_t v = 0; v < m.size(); ++v) out[v] = best > 0 && label[v] == best;
  return Mask(meta, std::move(out));
}

// Fills background regions of each axial (z) slice that do not touch the
// slice border.
inline Mask fill_holes_axial(const Mask& m) {
  const auto& meta = m.meta();
  const int nx = meta.dims[0], ny = meta.dims[1], nz = meta.dims[2];
  std::vector<std::uint8_t> out(m.data().begin(), m.data().end());
  std::vector<std::uint8_t> outside(static_cast<std::size_t>(nx) * ny);
  std::queue<std::pair<int, int>> q;
  for (int k = 0; k < nz; ++k) {
    std::fill(outside.begin(), outside.end(), 0);
    auto seed = [&](int i, int j) {
      const auto s = static_cast<std::size_t>(j) * nx + i;
      if (!m(i, j, k) && !outside[s]) {
        outside[s] = 1;
        q.push({i, j});
      }
    };
    for (int i = 0; i < nx; ++i) {
      seed(i, 0);
      seed(i, ny - 1);
    }
    for (int j = 0; j < ny; ++j) {
      seed(0, j);
      seed(nx - 1, j);
    }
    while (!q.empty()) {
      const auto [i, j] = q.front();
      q.pop();
      const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
      for (int t = 0; t < 4; ++t) {
        const int a = i + di[t], b = j + dj[t];
        if (a >= 0 && a < nx && b >= 0 && b < ny) seed(a, b);
      }
    }
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        if (!outside[static_cast<std::size_t>(j) * nx + i]) out[meta.offset(i, j, k)] = 1;
  }
  return Mask(meta, std::move(out));
}

}  // namespace detail

/// Body mask: threshold, keep the largest 6-connected component, fill holes
/// slice by slice.
inline Mask body_mask(const ScalarVolume& v, double threshold) {
  std::vector<std::uint8_t> m(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] > threshold;
  return detail::fill_holes_axial(detail::largest_component(Mask(v.meta(), std::move(m))));
}

/// Mean anterior (+y) displacement of the body surface between two phases,
/// in mm, over (x, z) columns where both contain body.
inline double amplitude_from_body(const ScalarVolume& eoe, const ScalarVolume& phase, double body_threshold) {
  require_same_grid(eoe.meta(), phase.meta(), "amplitude_from_body");
  const auto be = body_mask(eoe, body_threshold), bp = body_mask(phase, body_threshold);
  if (count(be) == 0 || count(bp) == 0) throw std::invalid_argument("amplitude_from_body: empty body");
  const auto& d = eoe.dims();
  auto anterior = [&](const Mask& m, int i, int k) {
    for (int j = d[1] - 1; j >= 0; --j)
      if (m(i, j, k)) return j;
    return -1;
  };
  double acc = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int i = 0; i < d[0]; ++i) {
      const int je = anterior(be, i, k), jp = anterior(bp, i, k);
      if (je < 0 || jp < 0) continue;
      acc += (jp - je);
      ++n;
    }
  if (n == 0) throw std::invalid_argument("amplitude_from_body: no overlapping body columns");
  return acc / static_cast<double>(n) * eoe.meta().spacing[1];
}

struct PhaseWithMasks {
  ScalarVolume image;
  Mask lungs;
  Mask tumor;
};

struct MetricReport {
  int phase_index = 0;
  double alpha_mm = 0;
  double mae = 0, ssim = 0, vv_percent = 0;
  double dsc_lungs = 0, dsc_tumor = 0;
  double com_lungs_mm = 0, com_tumor_mm = 0;
  double tv = 0, jac_mean = 0, jac_neg_fraction = 0;
};

/// Compares a candidate phase (image, masks, generating DVF) against the
/// true phase. vv_percent is the lung volume variation of the candidate
/// relative to the true phase.
inline MetricReport evaluate_pair(const PhaseWithMasks& truth, const PhaseWithMasks& candidate,
                                  const VectorField& phi, const SsimOptions& ssim_opt = {}) {
  require_same_grid(truth.image.meta(), candidate.image.meta(), "evaluate_pair");
  require_same_grid(truth.image.meta(), phi.meta(), "evaluate_pair");
  MetricReport r;
  r.mae = mae(truth.image, candidate.image);
  r.ssim = ssim(truth.image, candidate.image, ssim_opt);
  r.vv_percent = volume_variation(truth.lungs, candidate.lungs);
  r.dsc_lungs = dice(truth.lungs, candidate.lungs);
  r.dsc_tumor = dice(truth.tumor, candidate.tumor);
  r.com_lungs_mm = com_error(truth.lungs, candidate.lungs);
  r.com_tumor_mm = com_error(truth.tumor, candidate.tumor);
  r.tv = total_variation(phi);
  const auto js = jacobian_stats(phi);
  r.jac_mean = js.mean_abs_det;
  r.jac_neg_fraction = js.nonpositive_fraction;
  return r;
}

inline constexpr const char* kMetricCsvHeader =
    "phase_index,alpha_mm,mae,ssim,vv_percent,dsc_lungs,dsc_tumor,com_tumor_mm,tv,jac_mean,jac_neg_fraction";

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metric_csv_row(const std::string& label, const MetricReport& r) {
  std::string s = label;
  for (double v : {r.alpha_mm, r.mae, r.ssim, r.vv_percent, r.dsc_lungs, r.dsc_tumor, r.com_tumor_mm, r.tv, r.jac_mean,
                   r.jac_neg_fraction})
    s += "," + format_number(v);
  return s;
}

inline std::string metric_csv_row(const MetricReport& r) { return metric_csv_row(std::to_string(r.phase_index), r); }

}  // namespace rmsynth
