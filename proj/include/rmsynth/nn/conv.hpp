#pragma once

// 3-d convolution (cross-correlation) lowered to a GEMM over an im2col
// buffer. The GEMM runs through Eigen, single-threaded, so results are
// reproducible run to run.

#include <Eigen/Core>

#include "rmsynth/nn/ops.hpp"

namespace rmsynth::nn {

struct ConvGeometry {
  int cin, cout, k, stride, pad;
  int iz, iy, ix;
  int oz, oy, ox;

  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(oz) * oy * ox; }
};

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

namespace detail {

// Row r = (ci, kz, ky, kx) of the column matrix holds the input samples that
// kernel tap r sees at every output voxel (zero outside the volume).
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t ncol = g.cols();
  std::size_t r = 0;
  for (int ci = 0; ci < g.cin; ++ci)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++r) {
          T* row = col + r * ncol;
          std::size_t o = 0;
          for (int z = 0; z < g.oz; ++z) {
            const int iz = z * g.stride - g.pad + kz;
            for (int y = 0; y < g.oy; ++y) {
              const int iy = y * g.stride - g.pad + ky;
              if (iz < 0 || iz >= g.iz || iy < 0 || iy >= g.iy) {
                std::fill(row + o, row + o + g.ox, T(0));
                o += g.ox;
                continue;
              }
              const T* src = x + ((static_cast<std::size_t>(ci) * g.iz + iz) * g.iy + iy) * g.ix;
              for (int xx = 0; xx < g.ox; ++xx, ++o) {
                const int ix = xx * g.stride - g.pad + kx;
                row[o] = (ix >= 0 && ix < g.ix) ? src[ix] : T(0);
              }
            }
          }
        }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t ncol = g.cols();
  std::size_t r = 0;
  for (int ci = 0; ci < g.cin; ++ci)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++r) {
          const T* row = col + r * ncol;
          std::size_t o = 0;
          for (int z = 0; z < g.oz; ++z) {
            const int iz = z * g.stride - g.pad + kz;
            for (int y = 0; y < g.oy; ++y) {
              const int iy = y * g.stride - g.pad + ky;
              if (iz < 0 || iz >= g.iz || iy < 0 || iy >= g.iy) {
                o += g.ox;
                continue;
              }
              T* dst = dx + ((static_cast<std::size_t>(ci) * g.iz + iz) * g.iy + iy) * g.ix;
              for (int xx = 0; xx < g.ox; ++xx, ++o) {
                const int ix = xx * g.stride - g.pad + kx;
                if (ix >= 0 && ix < g.ix) dst[ix] += row[o];
              }
            }
          }
        }
}

}  // namespace detail

/// x: (Cin, Z, Y, X), w: (Cout, Cin, k, k, k), b: (Cout). Odd k only.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  detail::spatial_size(x.shape());
  detail::require(w.shape().size() == 5, "conv3d: weight must be (Cout, Cin, k, k, k)");
  const int k = w.dim(2);
  detail::require(w.dim(3) == k && w.dim(4) == k && k % 2 == 1, "conv3d: odd cubic kernels only");
  detail::require(w.dim(1) == x.dim(0), "conv3d: channel mismatch, input has " + std::to_string(x.dim(0)) +
                                            " channels, weight expects " + std::to_string(w.dim(1)));
  detail::require(b.size() == static_cast<std::size_t>(w.dim(0)), "conv3d: bias length mismatch");
  detail::require(stride >= 1 && pad >= 0, "conv3d: bad stride/pad");
  ConvGeometry g{x.dim(0), w.dim(0), k, stride, pad, x.dim(1), x.dim(2), x.dim(3), 0, 0, 0};
  g.oz = conv_out_size(g.iz, k, stride, pad);
  g.oy = conv_out_size(g.iy, k, stride, pad);
  g.ox = conv_out_size(g.ix, k, stride, pad);
  detail::require(g.oz >= 1 && g.oy >= 1 && g.ox >= 1, "conv3d: output would be empty");

  auto col = std::make_shared<std::vector<T>>(g.rows() * g.cols());
  detail::im2col(g, x.data().data(), col->data());
  std::vector<T> out(static_cast<std::size_t>(g.cout) * g.cols());
  {
    CMap W(w.data().data(), g.cout, g.rows());
    CMap Cm(col->data(), g.rows(), g.cols());
    MMap O(out.data(), g.cout, g.cols());
    O.noalias() = W * Cm;
    for (int co = 0; co < g.cout; ++co) O.row(co).array() += b.data()[co];
  }
  return make_result<T>({g.cout, g.oz, g.oy, g.ox}, std::move(out), {x, w, b}, [g, col](Node<T>& n) {
    CMap dO(n.grad.data(), g.cout, g.cols());
    CMap Cm(col->data(), g.rows(), g.cols());
    if (auto* gw = parent_grad(n, 1)) {
      MMap dW(gw->data(), g.cout, g.rows());
      dW.noalias() += dO * Cm.transpose();
    }
    // Plain loop: Eigen's vectorised redux peels by alignment, which would
    // make the summation order depend on where the allocator put the buffer.
    if (auto* gb = parent_grad(n, 2))
      for (int co = 0; co < g.cout; ++co) {
        const T* r = n.grad.data() + static_cast<std::size_t>(co) * g.cols();
        T s = 0;
        for (std::size_t i = 0; i < g.cols(); ++i) s += r[i];
        (*gb)[co] += s;
      }
    if (auto* gx = parent_grad(n, 0)) {
      CMap W(n.parents[1]->value.data(), g.cout, g.rows());
      Mat dcol = W.transpose() * dO;
      detail::col2im_add(g, dcol.data(), gx->data());
    }
  });
}

}  // namespace rmsynth::nn
