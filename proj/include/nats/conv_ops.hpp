/* Copyright 2026 The natsearch Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef NATS_CONV_OPS_HPP_
#define NATS_CONV_OPS_HPP_

#include <Eigen/Core>

#include "nats/tensor.hpp"

namespace nats {

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowMatrixMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstRowMatrixMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Same-padding rule: with pad = d*(k-1)/2 per orientation, every dilation
// yields out = ceil(in/stride), so candidates of all genotypes stay
// shape-compatible for stride 1 and 2.
inline int same_padding(int kernel, int dilation) {
  return dilation * (kernel - 1) / 2;
}

struct Conv2dGeom {
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, k_h = 0, k_w = 0;
  int stride = 1;
  int dil_h = 1, dil_w = 1;
  int pad_h = 0, pad_w = 0;
  int out_h = 0, out_w = 0;

  int patch_size() const { return in_c * k_h * k_w; }
};

inline int conv_out_extent(int in, int kernel, int stride, int dilation,
                           int pad) {
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

template <typename T>
Conv2dGeom conv2d_geom(const Tensor<T>& x, const Tensor<T>& w, int stride,
                       int dil_h, int dil_w, int pad_h, int pad_w) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be (N,C,H,W)");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be (Co,Ci,Kh,Kw)");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " do not match weight channels " +
                     std::to_string(w.dim(1)));
  Conv2dGeom g;
  g.in_c = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_c = w.dim(0);
  g.k_h = w.dim(2);
  g.k_w = w.dim(3);
  g.stride = stride;
  g.dil_h = dil_h;
  g.dil_w = dil_w;
  g.pad_h = pad_h;
  g.pad_w = pad_w;
  g.out_h = conv_out_extent(g.in_h, g.k_h, stride, dil_h, pad_h);
  g.out_w = conv_out_extent(g.in_w, g.k_w, stride, dil_w, pad_w);
  if (g.out_h < 1 || g.out_w < 1)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) +
                     " too small for kernel/stride");
  return g;
}

// Column matrix layout: (Ci*Kh*Kw) x (N*out_h*out_w), column-major; column
// j = n*out_h*out_w + oy*out_w + ox holds the receptive field of that output
// position, zero-padded outside the input.
template <typename T>
void im2col(const Tensor<T>& x, const Conv2dGeom& g, MatrixX<T>& col) {
  const int batch = x.dim(0);
  const int spatial = g.out_h * g.out_w;
  const int rows = g.patch_size();
  col.resize(rows, static_cast<Eigen::Index>(batch) * spatial);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    const T* xn = x.data() + static_cast<std::size_t>(n) * g.in_c * g.in_h *
                                 g.in_w;
    for (int oy = 0; oy < g.out_h; ++oy) {
      const int iy0 = oy * g.stride - g.pad_h;
      for (int ox = 0; ox < g.out_w; ++ox) {
        const int ix0 = ox * g.stride - g.pad_w;
        T* dst = col.data() + (static_cast<std::size_t>(n) * spatial +
                               static_cast<std::size_t>(oy) * g.out_w + ox) *
                                  rows;
        for (int ci = 0; ci < g.in_c; ++ci) {
          const T* xc = xn + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
          for (int kh = 0; kh < g.k_h; ++kh) {
            const int iy = iy0 + kh * g.dil_h;
            const bool row_ok = iy >= 0 && iy < g.in_h;
            for (int kw = 0; kw < g.k_w; ++kw) {
              const int ix = ix0 + kw * g.dil_w;
              *dst++ = (row_ok && ix >= 0 && ix < g.in_w)
                           ? xc[static_cast<std::size_t>(iy) * g.in_w + ix]
                           : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const MatrixX<T>& col, const Conv2dGeom& g, Tensor<T>& gx) {
  const int batch = gx.dim(0);
  const int spatial = g.out_h * g.out_w;
  const int rows = g.patch_size();
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    T* xn = gx.data() +
            static_cast<std::size_t>(n) * g.in_c * g.in_h * g.in_w;
    for (int oy = 0; oy < g.out_h; ++oy) {
      const int iy0 = oy * g.stride - g.pad_h;
      for (int ox = 0; ox < g.out_w; ++ox) {
        const int ix0 = ox * g.stride - g.pad_w;
        const T* src = col.data() +
                       (static_cast<std::size_t>(n) * spatial +
                        static_cast<std::size_t>(oy) * g.out_w + ox) *
                           rows;
        for (int ci = 0; ci < g.in_c; ++ci) {
          T* xc = xn + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
          for (int kh = 0; kh < g.k_h; ++kh) {
            const int iy = iy0 + kh * g.dil_h;
            const bool row_ok = iy >= 0 && iy < g.in_h;
            for (int kw = 0; kw < g.k_w; ++kw) {
              const int ix = ix0 + kw * g.dil_w;
              if (row_ok && ix >= 0 && ix < g.in_w)
                xc[static_cast<std::size_t>(iy) * g.in_w + ix] += *src;
              ++src;
            }
          }
        }
      }
    }
  }
}

// Cross-correlation with per-orientation dilation. When `col_cache` is given
// the column matrix is kept for the backward pass.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>* bias, int stride, int dil_h,
                         int dil_w, int pad_h, int pad_w,
                         MatrixX<T>* col_cache = nullptr) {
  const Conv2dGeom g = conv2d_geom(x, w, stride, dil_h, dil_w, pad_h, pad_w);
  const int batch = x.dim(0);
  const int spatial = g.out_h * g.out_w;

  MatrixX<T> local_col;
  MatrixX<T>& col = col_cache ? *col_cache : local_col;
  im2col(x, g, col);

  Tensor<T> y({batch, g.out_c, g.out_h, g.out_w});
  ConstRowMatrixMap<T> wmat(w.data(), g.out_c, g.patch_size());
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    RowMatrixMap<T> yn(y.data() + static_cast<std::size_t>(n) * g.out_c *
                                      spatial,
                       g.out_c, spatial);
    yn.noalias() = wmat * col.middleCols(
                              static_cast<Eigen::Index>(n) * spatial, spatial);
    if (bias) {
      for (int c = 0; c < g.out_c; ++c)
        yn.row(c).array() += (*bias)[static_cast<std::size_t>(c)];
    }
  }
  return y;
}

// Gradients of conv2d_forward. `col` must be the column matrix of the same
// forward call (or recomputed from the same input). Weight gradients are
// accumulated sample by sample in index order so results do not depend on
// the number of threads.
template <typename T>
struct Conv2dGrads {
  Tensor<T> gx;
  Tensor<T> gw;
  Tensor<T> gbias;  // empty when the layer has no bias
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Shape& x_shape, const Tensor<T>& w,
                               const Tensor<T>& gy, const MatrixX<T>& col,
                               const Conv2dGeom& g, bool has_bias,
                               bool need_gx = true) {
  const int batch = x_shape[0];
  const int spatial = g.out_h * g.out_w;
  const int rows = g.patch_size();

  Conv2dGrads<T> grads;
  grads.gw = Tensor<T>(w.shape());

  std::vector<MatrixX<T>> gw_partial(static_cast<std::size_t>(batch));
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    ConstRowMatrixMap<T> gyn(gy.data() + static_cast<std::size_t>(n) *
                                             g.out_c * spatial,
                             g.out_c, spatial);
    gw_partial[static_cast<std::size_t>(n)].noalias() =
        gyn *
        col.middleCols(static_cast<Eigen::Index>(n) * spatial, spatial)
            .transpose();
  }
  RowMatrixMap<T> gwmat(grads.gw.data(), g.out_c, rows);
  for (int n = 0; n < batch; ++n)
    gwmat += gw_partial[static_cast<std::size_t>(n)];

  if (has_bias) {
    grads.gbias = Tensor<T>({g.out_c});
    for (int n = 0; n < batch; ++n) {
      const T* base =
          gy.data() + static_cast<std::size_t>(n) * g.out_c * spatial;
      for (int c = 0; c < g.out_c; ++c) {
        T acc = 0;
        const T* p = base + static_cast<std::size_t>(c) * spatial;
        for (int i = 0; i < spatial; ++i) acc += p[i];
        grads.gbias[static_cast<std::size_t>(c)] += acc;
      }
    }
  }

  if (need_gx) {
    grads.gx = Tensor<T>(x_shape);
    MatrixX<T> gcol(rows, static_cast<Eigen::Index>(batch) * spatial);
    ConstRowMatrixMap<T> wmat(w.data(), g.out_c, rows);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < batch; ++n) {
      ConstRowMatrixMap<T> gyn(gy.data() + static_cast<std::size_t>(n) *
                                               g.out_c * spatial,
                               g.out_c, spatial);
      gcol.middleCols(static_cast<Eigen::Index>(n) * spatial, spatial)
          .noalias() = wmat.transpose() * gyn;
    }
    col2im_add(gcol, g, grads.gx);
  }
  return grads;
}

}  // namespace nats

#endif  // NATS_CONV_OPS_HPP_
