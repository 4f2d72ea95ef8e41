#include <Eigen/Core>
#include <vector>

#include "ldkl/kernels.hpp"

namespace ldkl::kernels::parallel {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Row-chunk size of the partitioned GEMM. Fixed so results do not depend on thread count.
constexpr std::size_t kGemmRowChunk = 64;

void im2col(const double* image, const ConvGeometry& g, double* cols) {
  constexpr std::size_t K = ConvGeometry::kernel;
  const std::size_t np = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        double* row = cols + ((c * K + ky) * K + kx) * np;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.height) && ix >= 0 &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] = inside ? image[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* image) {
  constexpr std::size_t K = ConvGeometry::kernel;
  const std::size_t np = g.out_pixels();
  std::fill(image, image + g.image_size(), 0.0);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        const double* row = cols + ((c * K + ky) * K + kx) * np;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            image[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <typename AOp, typename BOp>
void gemm_chunks(const AOp& a_op, const BOp& b_op, std::size_t m, std::size_t n, double* c, bool accumulate) {
  const long chunks = static_cast<long>((m + kGemmRowChunk - 1) / kGemmRowChunk);
#pragma omp parallel for schedule(static)
  for (long ch = 0; ch < chunks; ++ch) {
    const std::size_t r0 = static_cast<std::size_t>(ch) * kGemmRowChunk;
    const std::size_t len = std::min(kGemmRowChunk, m - r0);
    MutMap c_map(c + r0 * n, static_cast<long>(len), static_cast<long>(n));
    if (accumulate)
      c_map.noalias() += a_op.middleRows(static_cast<long>(r0), static_cast<long>(len)) * b_op;
    else
      c_map.noalias() = a_op.middleRows(static_cast<long>(r0), static_cast<long>(len)) * b_op;
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  const long lm = static_cast<long>(m), ln = static_cast<long>(n), lk = static_cast<long>(k);
  if (!trans_a && !trans_b)
    gemm_chunks(ConstMap(a, lm, lk), ConstMap(b, lk, ln), m, n, c, accumulate);
  else if (!trans_a && trans_b)
    gemm_chunks(ConstMap(a, lm, lk), ConstMap(b, ln, lk).transpose(), m, n, c, accumulate);
  else if (trans_a && !trans_b)
    gemm_chunks(ConstMap(a, lk, lm).transpose(), ConstMap(b, lk, ln), m, n, c, accumulate);
  else
    gemm_chunks(ConstMap(a, lk, lm).transpose(), ConstMap(b, ln, lk).transpose(), m, n, c, accumulate);
}

void conv2d_forward(const double* x, const double* w, double* y, std::size_t batch, const ConvGeometry& g,
                    std::size_t out_channels) {
  const long np = static_cast<long>(g.out_pixels()), ps = static_cast<long>(g.patch_size());
  const long oc = static_cast<long>(out_channels);
  ConstMap w_map(w, oc, ps);
#pragma omp parallel
  {
    std::vector<double> cols(g.patch_size() * g.out_pixels());
#pragma omp for schedule(static)
    for (long b = 0; b < static_cast<long>(batch); ++b) {
      im2col(x + b * g.image_size(), g, cols.data());
      MutMap y_map(y + b * out_channels * g.out_pixels(), oc, np);
      y_map.noalias() = w_map * ConstMap(cols.data(), ps, np);
    }
  }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx, std::size_t batch, const ConvGeometry& g,
                           std::size_t out_channels) {
  const long np = static_cast<long>(g.out_pixels()), ps = static_cast<long>(g.patch_size());
  const long oc = static_cast<long>(out_channels);
  ConstMap w_map(w, oc, ps);
#pragma omp parallel
  {
    std::vector<double> cols(g.patch_size() * g.out_pixels());
#pragma omp for schedule(static)
    for (long b = 0; b < static_cast<long>(batch); ++b) {
      MutMap cols_map(cols.data(), ps, np);
      cols_map.noalias() = w_map.transpose() * ConstMap(dy + b * out_channels * g.out_pixels(), oc, np);
      col2im(cols.data(), g, dx + b * g.image_size());
    }
  }
}

void conv2d_backward_weight(const double* x, const double* dy, double* dw, std::size_t batch,
                            const ConvGeometry& g, std::size_t out_channels) {
  const long np = static_cast<long>(g.out_pixels()), ps = static_cast<long>(g.patch_size());
  const long oc = static_cast<long>(out_channels);
  std::vector<double> cols(batch * g.patch_size() * g.out_pixels());
#pragma omp parallel for schedule(static)
  for (long b = 0; b < static_cast<long>(batch); ++b)
    im2col(x + b * g.image_size(), g, cols.data() + b * g.patch_size() * g.out_pixels());

  // Reduction over the batch stays in sample order.
  MutMap dw_map(dw, oc, ps);
  dw_map.setZero();
  for (std::size_t b = 0; b < batch; ++b)
    dw_map.noalias() += ConstMap(dy + b * out_channels * g.out_pixels(), oc, np) *
                        ConstMap(cols.data() + b * g.patch_size() * g.out_pixels(), ps, np).transpose();
}

void ard_se_gram(const double* x1, std::size_t n1, const double* x2, std::size_t n2, std::size_t dim,
                 const double* inv_ls2, double sf2, double* k) {
#pragma omp parallel for schedule(static)
  for (long i = 0; i < static_cast<long>(n1); ++i)
    detail::ard_se_row(x1 + i * dim, x2, n2, dim, inv_ls2, sf2, k + i * n2);
}

}  // namespace ldkl::kernels::parallel
