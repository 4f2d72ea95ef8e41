#pragma once

// Fits q(v) of a sparse variational GP by maximizing the ELBO with hyperparameters held fixed,
// so the result can be compared against the exact posterior under the same hyperparameters.

#include <cmath>
#include <numbers>
#include <random>

#include "ldkl/gp.hpp"
#include "ldkl/ops.hpp"
#include "ldkl/optimizer.hpp"

namespace ldkl::testing {

/// Negative ELBO: -sum_i E_q[log N(y_i | f_i, s^2)] + KL[q || p].
inline ad::Var negative_elbo(ad::Tape& t, ad::Var x, const Tensor& y, const gp::InducingGrid& grid,
                             const gp::VariationalVars& q, const gp::GpHyperVars& hp) {
  const gp::SvgpMoments m = gp::svgp_moments(x, grid, q, hp);
  const double noise = std::exp(2.0 * hp.log_noise_std.item());
  const double n = static_cast<double>(y.numel());
  ad::Var resid = ad::sub(t.constant(y), m.mean);
  ad::Var expected = ad::add(ad::sum(ad::square(resid)), ad::sum(m.latent_var));
  ad::Var nll = ad::add_scalar(ad::scale(expected, 0.5 / noise), 0.5 * n * std::log(2.0 * std::numbers::pi * noise));
  return ad::add(nll, gp::svgp_kl_term(t, grid, q, hp));
}

/// Adam with a stepped learning rate; returns the fitted q.
inline gp::VariationalGaussian fit_svgp(const Tensor& x, const Tensor& y, const gp::InducingGrid& grid,
                                        const gp::GpHyperparams& hp, std::size_t steps_per_stage = 8000) {
  const gp::VariationalGaussian init = gp::VariationalGaussian::from_prior(grid, hp);
  ad::ParameterStore store;
  auto& qm = store.add("q_mean", init.mean, ad::ParamGroup::GaussianProcess);
  auto& qc = store.add("q_chol", init.chol_raw, ad::ParamGroup::GaussianProcess);
  for (double lr : {5e-2, 1e-2, 2e-3, 4e-4}) {
    train::AdamW opt(store, {0.0, lr, 0.0});
    for (std::size_t s = 0; s < steps_per_stage; ++s) {
      ad::Tape t;
      const ad::Var loss = negative_elbo(t, t.constant(x), y, grid, {t.parameter(qm), t.parameter(qc)},
                                         gp::GpHyperVars::constants(t, hp));
      store.zero_grad();
      t.backward(loss);
      opt.step();
    }
  }
  return {qm.value, qc.value};
}

/// Root-mean-square difference between the fitted SVGP mean and the exact posterior mean at x_star.
inline double svgp_vs_exact_rmse(const Tensor& x, const Tensor& y, const Tensor& x_star,
                                 const gp::InducingGrid& grid, const gp::VariationalGaussian& q,
                                 const gp::GpHyperparams& hp) {
  const gp::GpPosterior exact = gp::gp_posterior(x, y, x_star, hp);
  ad::Tape t;
  const gp::DiagonalGaussianVar pred = gp::svgp_predict(t.constant(x_star), grid, gp::VariationalVars::constants(t, q),
                                                        gp::GpHyperVars::constants(t, hp));
  double s = 0.0;
  for (std::size_t i = 0; i < x_star.dim(0); ++i) {
    const double d = pred.mean.value()[i] - exact.mean[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(x_star.dim(0)));
}

struct SineTask {
  Tensor x;  // [64 x 1]
  Tensor y;  // [64]
  Tensor x_star;
  gp::GpHyperparams hp;
  gp::InducingGrid grid;
};

/// 64 noisy samples of sin on [0, 2 pi] with a 16-point grid over the same interval.
inline SineTask sine_task(std::size_t n = 64, std::size_t p = 16, std::uint64_t seed = 3) {
  SineTask task;
  const double hi = 2.0 * std::numbers::pi;
  task.hp = gp::GpHyperparams::isotropic(1, 1.0, 1.0, 0.01);
  task.x = Tensor({n, 1});
  task.y = Tensor({n});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (std::size_t i = 0; i < n; ++i) {
    task.x[i] = hi * static_cast<double>(i) / static_cast<double>(n - 1);
    task.y[i] = std::sin(task.x[i]) + noise(rng);
  }
  task.x_star = Tensor({97, 1});
  for (std::size_t i = 0; i < 97; ++i) task.x_star[i] = hi * static_cast<double>(i) / 96.0;
  task.grid = gp::make_inducing_grid(p, 1, 0.0, hi);
  return task;
}

}  // namespace ldkl::testing
