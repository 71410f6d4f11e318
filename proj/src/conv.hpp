#pragma once

// Strided 2-D convolution and its adjoint (transposed convolution) over
// NHWC activations stored as [B*H*W, C] row-major matrices.

#include "mmgen/tensor.hpp"

namespace mmgen::detail {

struct ConvGeometry {
  int channels = 0;  // channels of the large (conv input) side
  int height = 0;    // large side
  int width = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_height = 0;  // small (conv output) side
  int out_width = 0;

  static ConvGeometry make(int channels, int height, int width, int kernel, int stride,
                           int pad) {
    ConvGeometry g{channels, height, width, kernel, stride, pad, 0, 0};
    g.out_height = (height + 2 * pad - kernel) / stride + 1;
    g.out_width = (width + 2 * pad - kernel) / stride + 1;
    return g;
  }
  int patch() const { return kernel * kernel * channels; }
};

// cols[(b, oy, ox), (ky, kx, c)] = x[b, oy*s-p+ky, ox*s-p+kx, c], zero outside.
template <typename T>
void im2col(const T* x, int batch, const ConvGeometry& g, Mat<T>& cols) {
  cols.setZero(static_cast<Eigen::Index>(batch) * g.out_height * g.out_width, g.patch());
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < g.out_height; ++oy) {
      for (int ox = 0; ox < g.out_width; ++ox) {
        T* row = cols.data() +
                 ((static_cast<size_t>(b) * g.out_height + oy) * g.out_width + ox) * g.patch();
        for (int ky = 0; ky < g.kernel; ++ky) {
          int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.width) continue;
            const T* src = x + ((static_cast<size_t>(b) * g.height + iy) * g.width + ix) * g.channels;
            std::copy(src, src + g.channels, row + (ky * g.kernel + kx) * g.channels);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds cols back into x (x must be pre-sized).
template <typename T>
void col2im(const Mat<T>& cols, int batch, const ConvGeometry& g, T* x) {
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < g.out_height; ++oy) {
      for (int ox = 0; ox < g.out_width; ++ox) {
        const T* row = cols.data() +
                       ((static_cast<size_t>(b) * g.out_height + oy) * g.out_width + ox) * g.patch();
        for (int ky = 0; ky < g.kernel; ++ky) {
          int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.width) continue;
            T* dst = x + ((static_cast<size_t>(b) * g.height + iy) * g.width + ix) * g.channels;
            const T* src = row + (ky * g.kernel + kx) * g.channels;
            for (int c = 0; c < g.channels; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace mmgen::detail
