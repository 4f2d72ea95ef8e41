#pragma once

// ARD squared-exponential kernel, exact GP regression, and sparse variational GP inference
// over a fixed grid of inducing points.
//
// Positive quantities are stored as logs: log lengthscales, log signal std, log noise std.
// Every Var-based routine is differentiable in all of its Var arguments.

#include <cstddef>
#include <span>

#include "ldkl/autodiff.hpp"
#include "ldkl/tensor.hpp"

namespace ldkl::gp {

using ad::Tape;
using ad::Var;

/// Plain-value hyperparameters of one GP.
struct GpHyperparams {
  Tensor log_lengthscales;  // [d]
  double log_signal_std = 0.0;
  double log_noise_std = -2.0;
  double constant_mean = 0.0;

  static GpHyperparams isotropic(std::size_t dim, double lengthscale, double signal_var, double noise_var,
                                 double mean = 0.0);

  std::size_t dim() const { return log_lengthscales.numel(); }
  double signal_variance() const;
  double noise_variance() const;
  double lengthscale(std::size_t j) const;
};

/// Hyperparameters bound to a tape.
struct GpHyperVars {
  Var log_lengthscales;  // [d]
  Var log_signal_std;    // [1]
  Var log_noise_std;     // [1]
  Var constant_mean;     // [1]

  /// Binds plain values as constants (no gradient).
  static GpHyperVars constants(Tape& tape, const GpHyperparams& hp);
};

/// k(x, x') = sf^2 exp(-1/2 sum_j (x_j - x'_j)^2 / l_j^2).
double ard_se_kernel(std::span<const double> x, std::span<const double> x_prime, const GpHyperparams& hp);

/// Gram matrix k(X1, X2) for row-stacked inputs.
Tensor ard_se_gram(const Tensor& x1, const Tensor& x2, const GpHyperparams& hp);

/// log p(y | X) under a constant-mean GP with Gaussian noise, via Cholesky.
Var gp_log_marginal(Var x, Var y, const GpHyperVars& hp);
double gp_log_marginal(const Tensor& x, const Tensor& y, const GpHyperparams& hp);

struct GpPosterior {
  Tensor mean;  // [Q]
  Tensor cov;   // [Q x Q], symmetric, non-negative diagonal
};

/// Exact posterior over noise-free outputs at `x_star`.
GpPosterior gp_posterior(const Tensor& x, const Tensor& y, const Tensor& x_star, const GpHyperparams& hp);

/// Fixed inducing locations shared by the output GPs of one head.
struct InducingGrid {
  Tensor points;  // [P x d]
  bool shared_across_outputs = true;

  std::size_t size() const { return points.dim(0); }
  std::size_t dim() const { return points.dim(1); }
};

/// P points, equally spaced on the diagonal of [lo, hi]^d (a plain linspace when d == 1).
InducingGrid make_inducing_grid(std::size_t count, std::size_t dim, double lo, double hi);

/// q(v) = N(mean, L L^T) with L = lower_exp_diag(chol_raw).
struct VariationalGaussian {
  Tensor mean;      // [P]
  Tensor chol_raw;  // [P x P]; strict lower part and log-diagonal

  /// The prior restricted to the grid: mean c, covariance K_vv (+ ladder jitter).
  static VariationalGaussian from_prior(const InducingGrid& grid, const GpHyperparams& hp);
  /// Unconstrained storage for a given lower-triangular factor with positive diagonal.
  static Tensor raw_from_factor(const Tensor& factor);
  Tensor factor() const;
};

struct VariationalVars {
  Var mean;
  Var chol_raw;

  static VariationalVars constants(Tape& tape, const VariationalGaussian& q);
};

/// Per-element Gaussian; std strictly positive.
struct DiagonalGaussian {
  Tensor mean;
  Tensor std;
};

/// Per-element Gaussian bound to a tape.
struct DiagonalGaussianVar {
  Var mean;
  Var std;

  DiagonalGaussian values() const { return {mean.value(), std.value()}; }
};

/// Predictive standard deviations never fall below this.
inline constexpr double kStdFloor = 1e-4;

struct SvgpMoments {
  Var mean;        // [B]
  Var latent_var;  // [B], variance of f before the additive noise
  Var noise_var;   // [1]
};

/// Sparse variational predictive moments at `features` [B x d].
SvgpMoments svgp_moments(Var features, const InducingGrid& grid, const VariationalVars& q, const GpHyperVars& hp);

/// Predictive N(mean, latent_var + noise_var) with the std floor applied. Shapes [B].
DiagonalGaussianVar svgp_predict(Var features, const InducingGrid& grid, const VariationalVars& q,
                                 const GpHyperVars& hp);

/// KL[q(v) || p(v)] with p(v) = N(c 1, K_vv).
Var svgp_kl_term(Tape& tape, const InducingGrid& grid, const VariationalVars& q, const GpHyperVars& hp);

/// sum_i KL[N(mu_p_i, sd_p_i^2) || N(mu_q_i, sd_q_i^2)] over all elements.
Var gaussian_kl(const DiagonalGaussianVar& p, const DiagonalGaussianVar& q);
double gaussian_kl(const DiagonalGaussian& p, const DiagonalGaussian& q);

}  // namespace ldkl::gp
