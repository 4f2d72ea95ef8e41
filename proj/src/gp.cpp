#include "ldkl/gp.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "ldkl/error.hpp"
#include "ldkl/ops.hpp"

namespace ldkl::gp {

namespace ops = ad;

GpHyperparams GpHyperparams::isotropic(std::size_t dim, double lengthscale, double signal_var, double noise_var,
                                       double mean) {
  if (!(lengthscale > 0.0) || !(signal_var > 0.0) || noise_var < 0.0)
    throw ConfigError("GP hyperparameters must be positive (noise variance may be 0)");
  GpHyperparams hp;
  hp.log_lengthscales = Tensor({dim}, std::log(lengthscale));
  hp.log_signal_std = 0.5 * std::log(signal_var);
  hp.log_noise_std = 0.5 * std::log(noise_var);  // -inf for an exactly noise-free model
  hp.constant_mean = mean;
  return hp;
}

double GpHyperparams::signal_variance() const { return std::exp(2.0 * log_signal_std); }
double GpHyperparams::noise_variance() const { return std::exp(2.0 * log_noise_std); }
double GpHyperparams::lengthscale(std::size_t j) const { return std::exp(log_lengthscales[j]); }

GpHyperVars GpHyperVars::constants(Tape& tape, const GpHyperparams& hp) {
  return {tape.constant(hp.log_lengthscales), tape.constant(Tensor::scalar(hp.log_signal_std)),
          tape.constant(Tensor::scalar(hp.log_noise_std)), tape.constant(Tensor::scalar(hp.constant_mean))};
}

double ard_se_kernel(std::span<const double> x, std::span<const double> x_prime, const GpHyperparams& hp) {
  if (x.size() != x_prime.size() || x.size() != hp.dim())
    throw DimensionError("ard_se_kernel: input dimensions " + std::to_string(x.size()) + " and " +
                         std::to_string(x_prime.size()) + " vs " + std::to_string(hp.dim()) + " lengthscales");
  double q = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double r = (x[j] - x_prime[j]) / hp.lengthscale(j);
    q += r * r;
  }
  return hp.signal_variance() * std::exp(-0.5 * q);
}

Tensor ard_se_gram(const Tensor& x1, const Tensor& x2, const GpHyperparams& hp) {
  Tape tape;
  GpHyperVars v = GpHyperVars::constants(tape, hp);
  return ops::ard_se_cross(tape.constant(x1), tape.constant(x2), v.log_lengthscales, v.log_signal_std).value();
}

namespace {

void check_regression_inputs(const Shape& x, const Shape& y, std::size_t hp_dim) {
  if (x.size() != 2 || y.size() != 1 || x[0] != y[0])
    throw DimensionError("GP regression: inputs " + shape_string(x) + " do not match targets " + shape_string(y));
  if (x[1] != hp_dim)
    throw DimensionError("GP regression: input dimension " + std::to_string(x[1]) + " vs " + std::to_string(hp_dim) +
                         " lengthscales");
}

Var noise_variance(const GpHyperVars& hp) { return ops::exp(ops::scale(hp.log_noise_std, 2.0)); }

}  // namespace

Var gp_log_marginal(Var x, Var y, const GpHyperVars& hp) {
  check_regression_inputs(x.shape(), y.shape(), hp.log_lengthscales.numel());
  Tape& tape = *x.tape();
  const std::size_t m = x.shape()[0];
  Var k = ops::ard_se_cross(x, x, hp.log_lengthscales, hp.log_signal_std);
  Var ky = ops::add(k, ops::mul_broadcast(tape.constant(Tensor::identity(m)), noise_variance(hp)));
  Var l = ops::cholesky(ky);
  Var resid = ops::add_broadcast(y, ops::neg(hp.constant_mean));
  Var alpha = ops::tri_solve(l, resid, false);
  Var quad = ops::sum(ops::square(alpha));
  Var half_logdet = ops::sum(ops::log(ops::diag(l)));
  const double norm = 0.5 * static_cast<double>(m) * std::log(2.0 * std::numbers::pi);
  return ops::add_scalar(ops::neg(ops::add(ops::scale(quad, 0.5), half_logdet)), -norm);
}

double gp_log_marginal(const Tensor& x, const Tensor& y, const GpHyperparams& hp) {
  Tape tape;
  return gp_log_marginal(tape.constant(x), tape.constant(y), GpHyperVars::constants(tape, hp)).item();
}

GpPosterior gp_posterior(const Tensor& x, const Tensor& y, const Tensor& x_star, const GpHyperparams& hp) {
  check_regression_inputs(x.shape(), y.shape(), hp.dim());
  if (x_star.rank() != 2 || x_star.dim(1) != x.dim(1))
    throw DimensionError("gp_posterior: query shape " + shape_string(x_star.shape()) + " vs inputs " +
                         shape_string(x.shape()));
  const std::size_t m = x.dim(0), q = x_star.dim(0);
  Tensor ky = ard_se_gram(x, x, hp);
  for (std::size_t i = 0; i < m; ++i) ky.at(i, i) += hp.noise_variance();
  const Tensor l = ops::linalg::cholesky_with_jitter(ky);

  Tensor alpha = y;
  for (double& v : alpha.storage()) v -= hp.constant_mean;
  ops::linalg::tri_solve_inplace(l, alpha, false);
  ops::linalg::tri_solve_inplace(l, alpha, true);

  const Tensor k_star = ard_se_gram(x, x_star, hp);  // [M x Q]
  GpPosterior post;
  post.mean = Tensor({q}, hp.constant_mean);
  for (std::size_t j = 0; j < q; ++j)
    for (std::size_t i = 0; i < m; ++i) post.mean[j] += k_star.at(i, j) * alpha[i];

  Tensor v = k_star;
  ops::linalg::tri_solve_inplace(l, v, false);
  post.cov = ard_se_gram(x_star, x_star, hp);
  for (std::size_t a = 0; a < q; ++a)
    for (std::size_t b = 0; b < q; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += v.at(i, a) * v.at(i, b);
      post.cov.at(a, b) -= s;
    }
  for (std::size_t a = 0; a < q; ++a) {
    for (std::size_t b = a + 1; b < q; ++b) {
      const double sym = 0.5 * (post.cov.at(a, b) + post.cov.at(b, a));
      post.cov.at(a, b) = post.cov.at(b, a) = sym;
    }
    if (post.cov.at(a, a) < 0.0) post.cov.at(a, a) = 0.0;
  }
  return post;
}

InducingGrid make_inducing_grid(std::size_t count, std::size_t dim, double lo, double hi) {
  if (count < 2) throw ConfigError("inducing grid needs at least 2 points, got " + std::to_string(count));
  if (dim == 0) throw ConfigError("inducing grid feature dimension must be positive");
  if (!(lo < hi)) throw ConfigError("inducing grid interval must satisfy lo < hi");
  InducingGrid grid;
  grid.points = Tensor({count, dim});
  const double step = (hi - lo) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const double t = i + 1 == count ? hi : lo + step * static_cast<double>(i);
    for (std::size_t j = 0; j < dim; ++j) grid.points.at(i, j) = t;
  }
  return grid;
}

VariationalGaussian VariationalGaussian::from_prior(const InducingGrid& grid, const GpHyperparams& hp) {
  VariationalGaussian q;
  q.mean = Tensor({grid.size()}, hp.constant_mean);
  q.chol_raw = raw_from_factor(ops::linalg::cholesky_with_jitter(ard_se_gram(grid.points, grid.points, hp)));
  return q;
}

Tensor VariationalGaussian::raw_from_factor(const Tensor& factor) {
  const std::size_t n = factor.dim(0);
  Tensor raw({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (!(factor.at(i, i) > 0.0)) throw NumericalError("covariance factor needs a positive diagonal");
    for (std::size_t j = 0; j < i; ++j) raw.at(i, j) = factor.at(i, j);
    raw.at(i, i) = std::log(factor.at(i, i));
  }
  return raw;
}

Tensor VariationalGaussian::factor() const {
  Tape tape;
  return ops::lower_exp_diag(tape.constant(chol_raw)).value();
}

VariationalVars VariationalVars::constants(Tape& tape, const VariationalGaussian& q) {
  return {tape.constant(q.mean), tape.constant(q.chol_raw)};
}

namespace {

void check_head(const InducingGrid& grid, const VariationalVars& q, const GpHyperVars& hp) {
  const std::size_t p = grid.size();
  if (q.mean.numel() != p || q.chol_raw.shape() != Shape{p, p})
    throw DimensionError("variational distribution " + shape_string(q.chol_raw.shape()) + " does not match grid of " +
                         std::to_string(p) + " points");
  if (hp.log_lengthscales.numel() != grid.dim())
    throw DimensionError("GP lengthscales " + shape_string(hp.log_lengthscales.shape()) +
                         " do not match feature dimension " + std::to_string(grid.dim()));
}

}  // namespace

SvgpMoments svgp_moments(Var features, const InducingGrid& grid, const VariationalVars& q, const GpHyperVars& hp) {
  check_head(grid, q, hp);
  if (features.value().rank() != 2 || features.shape()[1] != grid.dim())
    throw DimensionError("svgp_predict: features " + shape_string(features.shape()) + " vs grid dimension " +
                         std::to_string(grid.dim()));
  Tape& tape = *features.tape();
  const std::size_t p = grid.size(), b = features.shape()[0];
  Var z = tape.constant(grid.points);
  Var lk = ops::cholesky(ops::ard_se_cross(z, z, hp.log_lengthscales, hp.log_signal_std));
  Var kvf = ops::ard_se_cross(z, features, hp.log_lengthscales, hp.log_signal_std);  // [P x B]
  Var a = ops::tri_solve(lk, kvf, false);                                             // L^{-1} K_vf
  Var w = ops::tri_solve(lk, a, true);                                                // K_vv^{-1} K_vf

  Var resid = ops::reshape(ops::add_broadcast(q.mean, ops::neg(hp.constant_mean)), {p, 1});
  Var mean = ops::add_broadcast(ops::reshape(ops::matmul(ops::transpose(w), resid), {b}), hp.constant_mean);

  Var u = ops::matmul(ops::transpose(ops::lower_exp_diag(q.chol_raw)), w);
  Var sf2 = ops::exp(ops::scale(hp.log_signal_std, 2.0));
  Var latent_var =
      ops::add_broadcast(ops::sub(ops::column_sums(ops::square(u)), ops::column_sums(ops::square(a))), sf2);
  return {mean, latent_var, noise_variance(hp)};
}

DiagonalGaussianVar svgp_predict(Var features, const InducingGrid& grid, const VariationalVars& q,
                                 const GpHyperVars& hp) {
  SvgpMoments m = svgp_moments(features, grid, q, hp);
  return {m.mean, ops::sqrt_floor(ops::add_broadcast(m.latent_var, m.noise_var), kStdFloor)};
}

Var svgp_kl_term(Tape& tape, const InducingGrid& grid, const VariationalVars& q, const GpHyperVars& hp) {
  check_head(grid, q, hp);
  const std::size_t p = grid.size();
  Var z = tape.constant(grid.points);
  Var lk = ops::cholesky(ops::ard_se_cross(z, z, hp.log_lengthscales, hp.log_signal_std));
  Var lv = ops::lower_exp_diag(q.chol_raw);
  Var trace = ops::sum(ops::square(ops::tri_solve(lk, lv, false)));
  Var resid = ops::add_broadcast(q.mean, ops::neg(hp.constant_mean));
  Var maha = ops::sum(ops::square(ops::tri_solve(lk, resid, false)));
  Var logdet_k = ops::scale(ops::sum(ops::log(ops::diag(lk))), 2.0);
  Var logdet_s = ops::scale(ops::sum(ops::diag(q.chol_raw)), 2.0);
  Var total = ops::add(ops::add(trace, maha), ops::sub(logdet_k, logdet_s));
  return ops::scale(ops::add_scalar(total, -static_cast<double>(p)), 0.5);
}

namespace {
void check_kl_inputs(const Tensor& pm, const Tensor& ps, const Tensor& qm, const Tensor& qs) {
  if (pm.shape() != ps.shape() || qm.shape() != qs.shape() || pm.shape() != qm.shape())
    throw DimensionError("gaussian_kl: mismatched shapes " + shape_string(pm.shape()) + " and " +
                         shape_string(qm.shape()));
  for (std::size_t i = 0; i < ps.numel(); ++i)
    if (!(ps[i] > 0.0) || !(qs[i] > 0.0)) throw ContractError("gaussian_kl: standard deviations must be positive");
}
}  // namespace

Var gaussian_kl(const DiagonalGaussianVar& p, const DiagonalGaussianVar& q) {
  check_kl_inputs(p.mean.value(), p.std.value(), q.mean.value(), q.std.value());
  Var log_ratio = ops::sub(ops::log(q.std), ops::log(p.std));
  Var num = ops::add(ops::square(p.std), ops::square(ops::sub(p.mean, q.mean)));
  Var quad = ops::div(num, ops::scale(ops::square(q.std), 2.0));
  Var per = ops::add_scalar(ops::add(log_ratio, quad), -0.5);
  return ops::sum(per);
}

double gaussian_kl(const DiagonalGaussian& p, const DiagonalGaussian& q) {
  check_kl_inputs(p.mean, p.std, q.mean, q.std);
  double total = 0.0;
  for (std::size_t i = 0; i < p.mean.numel(); ++i) {
    const double d = p.mean[i] - q.mean[i];
    total += std::log(q.std[i] / p.std[i]) + (p.std[i] * p.std[i] + d * d) / (2.0 * q.std[i] * q.std[i]) - 0.5;
  }
  return total;
}

}  // namespace ldkl::gp
