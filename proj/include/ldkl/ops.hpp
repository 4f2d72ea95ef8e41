#pragma once

// Differentiable operations on tape variables. Every function validates shapes and throws
// DimensionError naming the offending extents.

#include <cstddef>
#include <vector>

#include "ldkl/autodiff.hpp"

namespace ldkl::ad {

// Element-wise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

/// a + s, where s holds a single value.
Var add_broadcast(Var a, Var s);
/// a * s, where s holds a single value.
Var mul_broadcast(Var a, Var s);
/// a[B x n] + b[n] on every row.
Var add_row(Var a, Var b);

Var matmul(Var a, Var b);
Var transpose(Var a);
/// x[B x in] * w[in x out] + b[out].
Var linear(Var x, Var w, Var b);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
/// max(sqrt(max(a, 0)), floor); the floored branch carries no gradient.
Var sqrt_floor(Var a, double floor);
/// x for x >= 0, exp(x) - 1 otherwise.
Var elu(Var a);

/// Sum of all elements, shape {1}.
Var sum(Var a);
Var mean(Var a);
/// a[m x n] -> [n], summing over rows.
Var column_sums(Var a);

Var reshape(Var a, Shape shape);
/// Concatenation along axis 0; trailing extents must agree.
Var concat_rows(const std::vector<Var>& parts);
/// Concatenation of rank-2 tensors along axis 1.
Var concat_cols(const std::vector<Var>& parts);
/// Rows [start, start + count) along axis 0.
Var slice_rows(Var a, std::size_t start, std::size_t count);
/// Columns [start, start + count) of a rank-2 tensor.
Var slice_cols(Var a, std::size_t start, std::size_t count);

/// Identity forward; blocks gradient flow.
Var stop_grad(Var a);

/// Cross-correlation with 3x3 kernels. x: [B, C, H, W] or [C, H, W]; w: [O, C, 3, 3];
/// bias: [O] or an unbound Var for none.
Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad);
/// Adjoint of conv2d in its input. x: [B, Cin, H, W]; w: [Cin, Cout, 3, 3].
/// Output extent (H - 1) * stride - 2 * pad + 3 + out_pad.
Var conv_transpose2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad, std::size_t out_pad);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Normalizes per column ([B x C]) or per channel ([B, C, H, W]). Training mode uses batch
/// statistics and updates the running buffers; eval mode uses the buffers.
Var batch_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var,
               const BatchNormOptions& opts);

/// Cholesky factor of a symmetric positive definite matrix. If the plain factorization
/// fails, the jitter ladder 1e-8, 1e-7, ..., 1e-4 is added to the diagonal in turn.
Var cholesky(Var a);
/// L^{-1} b, or L^{-T} b when `transpose_l`. b is [n] or [n x m].
Var tri_solve(Var l, Var b, bool transpose_l);
/// Diagonal of a square matrix.
Var diag(Var a);
/// Lower-triangular matrix from unconstrained storage: strict lower part copied, diagonal
/// exponentiated, upper part zero.
Var lower_exp_diag(Var raw);

/// ARD squared-exponential cross covariance k[n1 x n2] between rows of x1 [n1 x d] and
/// x2 [n2 x d]. log_ls: [d] log lengthscales, log_sf: single log signal std.
Var ard_se_cross(Var x1, Var x2, Var log_ls, Var log_sf);

namespace linalg {
/// Plain Cholesky with the jitter ladder; throws NumericalError after the last rung.
Tensor cholesky_with_jitter(const Tensor& a, double* jitter_used = nullptr);
/// In-place triangular solve of L x = b (or L^T x = b); b is [n] or [n x m].
void tri_solve_inplace(const Tensor& l, Tensor& b, bool transpose_l);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
}  // namespace linalg

}  // namespace ldkl::ad
