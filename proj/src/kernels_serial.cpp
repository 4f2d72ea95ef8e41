#include <cmath>

#include "ldkl/kernels.hpp"

namespace ldkl::kernels {

std::size_t conv_out_extent(std::size_t in, std::size_t stride, std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (stride == 0 || padded < ConvGeometry::kernel) return 0;
  return (padded - ConvGeometry::kernel) / stride + 1;
}

namespace detail {
void ard_se_row(const double* x1_row, const double* x2, std::size_t n2, std::size_t dim, const double* inv_ls2,
                double sf2, double* k_row) {
  for (std::size_t j = 0; j < n2; ++j) {
    const double* x2_row = x2 + j * dim;
    double q = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = x1_row[d] - x2_row[d];
      q += diff * diff * inv_ls2[d];
    }
    k_row[j] = sf2 * std::exp(-0.5 * q);
  }
}
}  // namespace detail

namespace serial {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void conv2d_forward(const double* x, const double* w, double* y, std::size_t batch, const ConvGeometry& g,
                    std::size_t out_channels) {
  constexpr std::size_t K = ConvGeometry::kernel;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x + b * g.image_size();
    double* yb = y + b * out_channels * g.out_pixels();
    for (std::size_t o = 0; o < out_channels; ++o) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double s = 0.0;
          for (std::size_t c = 0; c < g.channels; ++c) {
            for (std::size_t ky = 0; ky < K; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                s += w[((o * g.channels + c) * K + ky) * K + kx] * xb[(c * g.height + iy) * g.width + ix];
              }
            }
          }
          yb[(o * g.out_h + oy) * g.out_w + ox] = s;
        }
      }
    }
  }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx, std::size_t batch, const ConvGeometry& g,
                           std::size_t out_channels) {
  constexpr std::size_t K = ConvGeometry::kernel;
  for (std::size_t i = 0; i < batch * g.image_size(); ++i) dx[i] = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* dyb = dy + b * out_channels * g.out_pixels();
    double* dxb = dx + b * g.image_size();
    for (std::size_t o = 0; o < out_channels; ++o) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const double gv = dyb[(o * g.out_h + oy) * g.out_w + ox];
          for (std::size_t c = 0; c < g.channels; ++c) {
            for (std::size_t ky = 0; ky < K; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                dxb[(c * g.height + iy) * g.width + ix] += gv * w[((o * g.channels + c) * K + ky) * K + kx];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const double* x, const double* dy, double* dw, std::size_t batch,
                            const ConvGeometry& g, std::size_t out_channels) {
  constexpr std::size_t K = ConvGeometry::kernel;
  for (std::size_t i = 0; i < out_channels * g.patch_size(); ++i) dw[i] = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x + b * g.image_size();
    const double* dyb = dy + b * out_channels * g.out_pixels();
    for (std::size_t o = 0; o < out_channels; ++o) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const double gv = dyb[(o * g.out_h + oy) * g.out_w + ox];
          for (std::size_t c = 0; c < g.channels; ++c) {
            for (std::size_t ky = 0; ky < K; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                dw[((o * g.channels + c) * K + ky) * K + kx] += gv * xb[(c * g.height + iy) * g.width + ix];
              }
            }
          }
        }
      }
    }
  }
}

void ard_se_gram(const double* x1, std::size_t n1, const double* x2, std::size_t n2, std::size_t dim,
                 const double* inv_ls2, double sf2, double* k) {
  for (std::size_t i = 0; i < n1; ++i) detail::ard_se_row(x1 + i * dim, x2, n2, dim, inv_ls2, sf2, k + i * n2);
}

}  // namespace serial
}  // namespace ldkl::kernels
