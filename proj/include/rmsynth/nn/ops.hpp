#pragma once

// Differentiable element-wise, normalization, reshaping, loss and warping
// ops. Feature maps are laid out (C, Z, Y, X) with X fastest; there is no
// batch axis (batch size is 1 throughout).

#include <algorithm>
#include <array>
#include <cmath>

#include "rmsynth/nn/tensor.hpp"
#include "rmsynth/volume.hpp"
#include "rmsynth/warp.hpp"

namespace rmsynth::nn {

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}
inline std::size_t spatial_size(const Shape& s) {
  require(s.size() == 4, "expected a (C,Z,Y,X) tensor, got " + shape_str(s));
  return static_cast<std::size_t>(s[1]) * s[2] * s[3];
}
}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = parent_grad(n, k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  return make_result<T>(a.shape(), std::move(v), {a}, [s](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

/// a * s where s is a one-element tensor (e.g. a learnable gain).
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  detail::require(s.size() == 1, "mul_scalar: expected a one-element tensor");
  const T k = s.item();
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * k;
  return make_result<T>(a.shape(), std::move(v), {a, s}, [k](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * k;
    if (auto* g = parent_grad(n, 1)) {
      T acc = 0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * av[i];
      (*g)[0] += acc;
    }
  });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] > T(0) ? x.data()[i] : slope * x.data()[i];
  return make_result<T>(x.shape(), std::move(v), {x}, [slope](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += xv[i] > T(0) ? n.grad[i] : slope * n.grad[i];
  });
}

/// Per-channel normalization to zero mean and unit variance,
/// sigma = sqrt(var + eps) with the biased variance.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps) {
  const std::size_t m = detail::spatial_size(x.shape());
  const int C = x.dim(0);
  detail::require(m >= 2, "instance_norm: spatial size must be >= 2");
  std::vector<T> y(x.size());
  auto inv_sigma = std::make_shared<std::vector<T>>(C);
  for (int c = 0; c < C; ++c) {
    const T* xc = x.data().data() + c * m;
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += xc[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*inv_sigma)[c] = static_cast<T>(is);
    for (std::size_t i = 0; i < m; ++i) y[c * m + i] = static_cast<T>((xc[i] - mean) * is);
  }
  return make_result<T>(x.shape(), std::move(y), {x}, [inv_sigma, m, C](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    for (int c = 0; c < C; ++c) {
      const T* yc = n.value.data() + c * m;
      const T* dy = n.grad.data() + c * m;
      double mean_dy = 0.0, mean_dyy = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        mean_dy += dy[i];
        mean_dyy += static_cast<double>(dy[i]) * yc[i];
      }
      mean_dy /= static_cast<double>(m);
      mean_dyy /= static_cast<double>(m);
      const double is = (*inv_sigma)[c];
      for (std::size_t i = 0; i < m; ++i)
        (*g)[c * m + i] += static_cast<T>(is * (dy[i] - mean_dy - yc[i] * mean_dyy));
    }
  });
}

/// y[c] = gamma[c] * x[c] + beta[c]
template <class T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t m = detail::spatial_size(x.shape());
  const int C = x.dim(0);
  detail::require(gamma.size() == static_cast<std::size_t>(C) && beta.size() == static_cast<std::size_t>(C),
                  "channel_affine: gamma/beta length must equal channel count");
  std::vector<T> y(x.size());
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < m; ++i) y[c * m + i] = gamma.data()[c] * x.data()[c * m + i] + beta.data()[c];
  return make_result<T>(x.shape(), std::move(y), {x, gamma, beta}, [m, C](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    const auto& gv = n.parents[1]->value;
    auto* gx = parent_grad(n, 0);
    auto* gg = parent_grad(n, 1);
    auto* gb = parent_grad(n, 2);
    for (int c = 0; c < C; ++c) {
      T sg = 0, sb = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const T d = n.grad[c * m + i];
        if (gx) (*gx)[c * m + i] += d * gv[c];
        sg += d * xv[c * m + i];
        sb += d;
      }
      if (gg) (*gg)[c] += sg;
      if (gb) (*gb)[c] += sb;
    }
  });
}

/// Dense layer on a vector: y = W x + b, W shaped (out, in).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(w.shape().size() == 2, "linear: weight must be 2-d");
  const int out = w.dim(0), in = w.dim(1);
  detail::require(x.size() == static_cast<std::size_t>(in) && b.size() == static_cast<std::size_t>(out),
                  "linear: shape mismatch");
  std::vector<T> y(out);
  for (int o = 0; o < out; ++o) {
    T acc = b.data()[o];
    for (int i = 0; i < in; ++i) acc += w.data()[o * in + i] * x.data()[i];
    y[o] = acc;
  }
  return make_result<T>({out}, std::move(y), {x, w, b}, [out, in](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    auto* gx = parent_grad(n, 0);
    auto* gw = parent_grad(n, 1);
    auto* gb = parent_grad(n, 2);
    for (int o = 0; o < out; ++o) {
      const T d = n.grad[o];
      if (gb) (*gb)[o] += d;
      for (int i = 0; i < in; ++i) {
        if (gw) (*gw)[o * in + i] += d * xv[i];
        if (gx) (*gx)[i] += d * wv[o * in + i];
      }
    }
  });
}

/// Single-channel 1-d cross-correlation with zero "same" padding; the kernel
/// length must be odd.
template <class T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b) {
  const int L = static_cast<int>(x.size()), K = static_cast<int>(k.size()), h = K / 2;
  detail::require(K % 2 == 1 && b.size() == 1, "conv1d_same: odd kernel and scalar bias required");
  std::vector<T> y(L);
  for (int i = 0; i < L; ++i) {
    T acc = b.data()[0];
    for (int t = 0; t < K; ++t) {
      const int j = i + t - h;
      if (j >= 0 && j < L) acc += k.data()[t] * x.data()[j];
    }
    y[i] = acc;
  }
  return make_result<T>({L}, std::move(y), {x, k, b}, [L, K, h](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    const auto& kv = n.parents[1]->value;
    auto* gx = parent_grad(n, 0);
    auto* gk = parent_grad(n, 1);
    auto* gb = parent_grad(n, 2);
    for (int i = 0; i < L; ++i) {
      const T d = n.grad[i];
      if (gb) (*gb)[0] += d;
      for (int t = 0; t < K; ++t) {
        const int j = i + t - h;
        if (j < 0 || j >= L) continue;
        if (gk) (*gk)[t] += d * xv[j];
        if (gx) (*gx)[j] += d * kv[t];
      }
    }
  });
}

/// Contiguous slice [start, start+len) of a flat tensor.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::require(start + len <= x.size(), "slice: out of range");
  std::vector<T> v(x.data().begin() + start, x.data().begin() + start + len);
  return make_result<T>({static_cast<int>(len)}, std::move(v), {x}, [start, len](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < len; ++i) (*g)[start + i] += n.grad[i];
  });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = detail::spatial_size(a.shape());
  detail::require(b.shape().size() == 4 && std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1),
                  "concat_channels: spatial shape mismatch");
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.size();
  (void)m;
  return make_result<T>(std::move(s), std::move(v), {a, b}, [na](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < na; ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[na + i];
  });
}

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: nothing to concatenate");
  Tensor<T> out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat_channels(out, parts[i]);
  return out;
}

/// Nearest-neighbour upsampling by 2 along each spatial axis.
template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  detail::spatial_size(x.shape());
  const int C = x.dim(0), Z = x.dim(1), Y = x.dim(2), X = x.dim(3);
  Shape s{C, 2 * Z, 2 * Y, 2 * X};
  std::vector<T> v(numel(s));
  std::size_t o = 0;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < 2 * Z; ++z)
      for (int y = 0; y < 2 * Y; ++y) {
        const T* row = x.data().data() + ((static_cast<std::size_t>(c) * Z + z / 2) * Y + y / 2) * X;
        for (int xx = 0; xx < 2 * X; ++xx) v[o++] = row[xx / 2];
      }
  return make_result<T>(std::move(s), std::move(v), {x}, [C, Z, Y, X](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    std::size_t o = 0;
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < 2 * Z; ++z)
        for (int y = 0; y < 2 * Y; ++y) {
          T* row = g->data() + ((static_cast<std::size_t>(c) * Z + z / 2) * Y + y / 2) * X;
          for (int xx = 0; xx < 2 * X; ++xx) row[xx / 2] += n.grad[o++];
        }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const std::size_t N = x.size();
  return make_result<T>({1}, {static_cast<T>(acc / static_cast<double>(N))}, {x}, [N](Node<T>& n) {
    if (auto* g = parent_grad(n, 0)) {
      const T d = n.grad[0] / static_cast<T>(N);
      for (auto& v : *g) v += d;
    }
  });
}

/// mean |a - b| over every element; subgradient 0 where a == b.
template <class T>
Tensor<T> l1_mean(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "l1_mean: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
  const std::size_t N = a.size();
  return make_result<T>({1}, {static_cast<T>(acc / static_cast<double>(N))}, {a, b}, [N](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    const T d = n.grad[0] / static_cast<T>(N);
    auto* ga = parent_grad(n, 0);
    auto* gb = parent_grad(n, 1);
    for (std::size_t i = 0; i < N; ++i) {
      const T s = av[i] > bv[i] ? d : (av[i] < bv[i] ? -d : T(0));
      if (ga) (*ga)[i] += s;
      if (gb) (*gb)[i] -= s;
    }
  });
}

/// Per-voxel Euclidean norm of a (3, Z, Y, X) field, smoothed as
/// sqrt(sum phi_c^2 + eps).
template <class T>
Tensor<T> magnitude(const Tensor<T>& phi, T eps = T(1e-8)) {
  const std::size_t m = detail::spatial_size(phi.shape());
  detail::require(phi.dim(0) == 3, "magnitude: expected a 3-channel field");
  Shape s = phi.shape();
  s[0] = 1;
  std::vector<T> v(m);
  const T* p = phi.data().data();
  for (std::size_t i = 0; i < m; ++i)
    v[i] = std::sqrt(p[i] * p[i] + p[m + i] * p[m + i] + p[2 * m + i] * p[2 * m + i] + eps);
  return make_result<T>(std::move(s), std::move(v), {phi}, [m](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    const auto& pv = n.parents[0]->value;
    for (std::size_t i = 0; i < m; ++i) {
      const T k = n.grad[i] / n.value[i];
      for (int c = 0; c < 3; ++c) (*g)[c * m + i] += k * pv[c * m + i];
    }
  });
}

/// Mean binary cross-entropy of logits against a constant label (0 or 1),
/// computed with the stable softplus form.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, T label) {
  double acc = 0.0;
  for (T z : logits.data()) {
    const double zd = z;
    const double sp = std::max(zd, 0.0) + std::log1p(std::exp(-std::abs(zd)));  // log(1 + e^z)
    acc += sp - label * zd;
  }
  const std::size_t N = logits.size();
  return make_result<T>({1}, {static_cast<T>(acc / static_cast<double>(N))}, {logits}, [N, label](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    const auto& zv = n.parents[0]->value;
    const T d = n.grad[0] / static_cast<T>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const T sig = T(1) / (T(1) + std::exp(-zv[i]));
      (*g)[i] += d * (sig - label);
    }
  });
}

/// Spatial transformer: warps a (1, Z, Y, X) source by a (3, Z, Y, X) field
/// of mm displacements (components ordered x, y, z).
template <class T>
Tensor<T> warp(const Tensor<T>& src, const Tensor<T>& phi, const Vec3f& spacing) {
  const std::size_t m = detail::spatial_size(src.shape());
  detail::require(src.dim(0) == 1 && phi.shape().size() == 4 && phi.dim(0) == 3 &&
                      std::equal(src.shape().begin() + 1, src.shape().end(), phi.shape().begin() + 1),
                  "warp: expected (1,Z,Y,X) source and (3,Z,Y,X) field on the same grid");
  const Index3 dims{src.dim(3), src.dim(2), src.dim(1)};
  const T* p = phi.data().data();
  auto ctx = std::make_shared<WarpContext<T>>(dims, spacing, std::span<const T>(p, m),
                                              std::span<const T>(p + m, m), std::span<const T>(p + 2 * m, m));
  std::vector<T> out(m);
  warp_forward_kernel<T, T>(*ctx, src.data(), out);
  return make_result<T>(src.shape(), std::move(out), {src, phi}, [ctx, m](Node<T>& n) {
    auto* gs = parent_grad(n, 0);
    auto* gp = parent_grad(n, 1);
    std::span<T> gsrc = gs ? std::span<T>(*gs) : std::span<T>();
    std::span<T> gx, gy, gz;
    if (gp) {
      gx = std::span<T>(gp->data(), m);
      gy = std::span<T>(gp->data() + m, m);
      gz = std::span<T>(gp->data() + 2 * m, m);
    }
    warp_backward_kernel<T>(*ctx, n.parents[0]->value, n.grad, gsrc, gx, gy, gz);
  });
}

}  // namespace rmsynth::nn
