#pragma once

// Raw numeric kernels behind the autodiff ops. Two implementations share every signature:
//   serial::   straightforward loops, the reference the tests compare against
//   parallel:: OpenMP over fixed-size work partitions plus Eigen GEMM on each partition
// Work partitions never depend on the thread count, so parallel results are bitwise
// identical for any OMP_NUM_THREADS.

#include <cstddef>

namespace ldkl::kernels {

/// 3x3 convolution geometry. `channels/height/width` describe the image side,
/// `out_h/out_w` the correlation output side.
struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  static constexpr std::size_t kernel = 3;

  std::size_t image_size() const { return channels * height * width; }
  std::size_t out_pixels() const { return out_h * out_w; }
  std::size_t patch_size() const { return channels * kernel * kernel; }
};

/// Output extent of a 3x3 correlation; 0 when the configuration produces no output.
std::size_t conv_out_extent(std::size_t in, std::size_t stride, std::size_t pad);

namespace serial {

/// C[m x n] = op(A) * op(B) (+ C when accumulate). op transposes when the flag is set;
/// A is stored as [m x k] (or [k x m] when trans_a), B as [k x n] (or [n x k]).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);

/// y[B, O, out_h, out_w] = correlate(x[B, C, H, W], w[O, C, 3, 3]).
void conv2d_forward(const double* x, const double* w, double* y, std::size_t batch, const ConvGeometry& g,
                    std::size_t out_channels);
/// dx[B, C, H, W] = adjoint of conv2d_forward applied to dy.
void conv2d_backward_input(const double* dy, const double* w, double* dx, std::size_t batch, const ConvGeometry& g,
                           std::size_t out_channels);
/// dw[O, C, 3, 3] = sum over batch of dy (x) x patches.
void conv2d_backward_weight(const double* x, const double* dy, double* dw, std::size_t batch,
                            const ConvGeometry& g, std::size_t out_channels);

/// k[n1 x n2] = sf2 * exp(-0.5 * sum_j (x1_ij - x2_kj)^2 * inv_ls2_j).
void ard_se_gram(const double* x1, std::size_t n1, const double* x2, std::size_t n2, std::size_t dim,
                 const double* inv_ls2, double sf2, double* k);

}  // namespace serial

namespace parallel {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);
void conv2d_forward(const double* x, const double* w, double* y, std::size_t batch, const ConvGeometry& g,
                    std::size_t out_channels);
void conv2d_backward_input(const double* dy, const double* w, double* dx, std::size_t batch, const ConvGeometry& g,
                           std::size_t out_channels);
void conv2d_backward_weight(const double* x, const double* dy, double* dw, std::size_t batch,
                            const ConvGeometry& g, std::size_t out_channels);
void ard_se_gram(const double* x1, std::size_t n1, const double* x2, std::size_t n2, std::size_t dim,
                 const double* inv_ls2, double sf2, double* k);

}  // namespace parallel

namespace detail {
/// One row of the ARD-SE Gram matrix; shared by both implementations so they agree bitwise.
void ard_se_row(const double* x1_row, const double* x2, std::size_t n2, std::size_t dim, const double* inv_ls2,
                double sf2, double* k_row);
}  // namespace detail

}  // namespace ldkl::kernels
