#include "ldkl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>

#include "ldkl/checkpoint.hpp"
#include "ldkl/error.hpp"
#include "ldkl/ops.hpp"
#include "ldkl/optimizer.hpp"

namespace ldkl::train {

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (!(lambda_var >= 0.0)) throw ConfigError("lambda_var must be non-negative");
  if (!(lr_nn >= 0.0) || !(lr_gp >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  noise.validate();
}

Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> indices, const sim::NoiseConfig& noise,
                 sim::Rng& rng) {
  if (indices.empty()) throw ContractError("make_batch: empty index set");
  const Shape frame = ds.transitions.at(indices[0]).x_t.frames.shape();
  Shape shape{indices.size()};
  shape.insert(shape.end(), frame.begin(), frame.end());
  Batch b{Tensor(shape), Tensor({indices.size()}), Tensor(shape)};
  const std::size_t per = shape_numel(frame);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const data::Transition& tr = ds.transitions.at(indices[k]);
    const Tensor xt = sim::add_measurement_noise(tr.x_t.frames, noise.sigma_x2, rng);
    const Tensor xn = sim::add_measurement_noise(tr.x_next.frames, noise.sigma_x2, rng);
    std::copy(xt.storage().begin(), xt.storage().end(), b.x_t.storage().begin() + k * per);
    std::copy(xn.storage().begin(), xn.storage().end(), b.x_next.storage().begin() + k * per);
    b.u[k] = sim::add_control_noise(tr.u_t, noise.sigma_u2, rng);
  }
  return b;
}

Var reconstruction_nll(Var x, Var x_hat) {
  if (x.shape() != x_hat.shape())
    throw DimensionError("reconstruction_nll: target " + shape_string(x.shape()) + " vs reconstruction " +
                         shape_string(x_hat.shape()));
  const double batch = static_cast<double>(x.shape()[0]);
  const double per = static_cast<double>(x.numel()) / batch;
  Var sq = ad::sum(ad::square(ad::sub(x, x_hat)));
  return ad::add_scalar(ad::scale(sq, 0.5 / batch), 0.5 * per * std::log(2.0 * std::numbers::pi));
}

Var balanced_kl(const LatentDistribution& posterior, const LatentDistribution& prior, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  const double batch = static_cast<double>(posterior.mean.shape()[0]);
  const LatentDistribution post_sg{ad::stop_grad(posterior.mean), ad::stop_grad(posterior.std)};
  const LatentDistribution prior_sg{ad::stop_grad(prior.mean), ad::stop_grad(prior.std)};
  Var to_prior = ad::scale(gp::gaussian_kl(post_sg, prior), alpha / batch);
  Var to_post = ad::scale(gp::gaussian_kl(posterior, prior_sg), (1.0 - alpha) / batch);
  return ad::add(to_prior, to_post);
}

Var recon_loss(Tape& tape, LatentModel& model, Var x_t, sim::Rng& rng) {
  const LatentDistribution enc = model.encode(tape, x_t);
  return reconstruction_nll(x_t, model.decode(tape, model::sample_latent(enc, rng)));
}

Var dyn_loss(Tape& tape, LatentModel& model, Var x_t, Var u, Var x_next, double alpha, sim::Rng& rng) {
  const LatentDistribution enc_t = model.encode(tape, x_t);
  const LatentDistribution post = model.encode(tape, x_next);
  const LatentDistribution prior = model.predict_next(tape, model::sample_latent(enc_t, rng), u);
  return balanced_kl(post, prior, alpha);
}

LossTerms total_loss(Tape& tape, LatentModel& model, const Batch& batch, const TrainConfig& cfg, double kl_scale,
                     sim::Rng& rng) {
  if (batch.tainted) throw ContractError("training batch carries true-state metadata");
  const std::size_t b = batch.size();
  Var x_t = tape.constant(batch.x_t);
  Var both = ad::concat_rows({x_t, tape.constant(batch.x_next)});
  const LatentDistribution enc = model.encode(tape, both);
  const LatentDistribution enc_t{ad::slice_rows(enc.mean, 0, b), ad::slice_rows(enc.std, 0, b)};
  const LatentDistribution post{ad::slice_rows(enc.mean, b, b), ad::slice_rows(enc.std, b, b)};

  Var z_t = model::sample_latent(enc_t, rng);
  LossTerms t;
  t.recon = reconstruction_nll(x_t, model.decode(tape, z_t));
  t.dyn = balanced_kl(post, model.predict_next(tape, z_t, tape.constant(batch.u)), cfg.alpha);
  t.var_kl_enc = ad::scale(model.encoder_head_kl(tape), kl_scale);
  t.var_kl_fwd = ad::scale(model.forward_head_kl(tape), kl_scale);
  t.total = ad::add(t.recon, ad::scale(t.dyn, cfg.beta));
  t.total = ad::add(t.total, ad::scale(ad::add(t.var_kl_enc, t.var_kl_fwd), cfg.lambda_var));
  return t;
}

std::vector<EpochMetrics> train(LatentModel& model, const data::Dataset& ds, const TrainConfig& cfg,
                                const TrainOutputs& out) {
  cfg.validate();
  const std::size_t n = ds.transitions.size();
  if (n < 2) throw ConfigError("training needs at least 2 transitions");
  const Shape expected = model.config().measurement_shape();
  if (ds.transitions.front().x_t.frames.shape() != expected)
    throw ConfigError("dataset measurements " + shape_string(ds.transitions.front().x_t.frames.shape()) +
                      " do not match the model's " + shape_string(expected));

  AdamW opt(model.params(), {cfg.lr_nn, cfg.lr_gp, cfg.weight_decay});
  sim::Rng shuffle_rng = data::make_stream(cfg.seed, 0x5348);
  sim::Rng noise_rng = data::make_stream(cfg.seed, 0x4e4f);
  sim::Rng sample_rng = data::make_stream(cfg.seed, 0x5a53);
  const double kl_scale = 1.0 / static_cast<double>(n);

  std::vector<std::size_t> order(n);
  std::vector<EpochMetrics> history;
  model.set_training(true);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start + 2 <= n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      if (count < 2) break;
      const Batch batch =
          make_batch(ds, std::span<const std::size_t>(order).subspan(start, count), cfg.noise, noise_rng);
      Tape tape;
      const LossTerms t = total_loss(tape, model, batch, cfg, kl_scale, sample_rng);
      if (!std::isfinite(t.total.item()))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps));
      model.params().zero_grad();
      tape.backward(t.total);
      opt.step();
      m.recon_loss += t.recon.item();
      m.dyn_loss += t.dyn.item();
      m.var_kl_enc += t.var_kl_enc.item();
      m.var_kl_fwd += t.var_kl_fwd.item();
      m.total += t.total.item();
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    m.recon_loss *= inv;
    m.dyn_loss *= inv;
    m.var_kl_enc *= inv;
    m.var_kl_fwd *= inv;
    m.total *= inv;
    history.push_back(m);
    if (!out.metrics_csv.empty()) write_metrics_csv(history, out.metrics_csv);
    if (!out.checkpoint.empty()) model::save_checkpoint(model, out.checkpoint);
    if (out.on_epoch) out.on_epoch(m);
  }
  model.set_training(false);
  if (!out.checkpoint.empty()) model::save_checkpoint(model, out.checkpoint);
  return history;
}

void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "epoch,recon_loss,dyn_loss,var_kl_enc,var_kl_fwd,total\n";
  char line[256];
  for (const EpochMetrics& m : history) {
    std::snprintf(line, sizeof line, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", m.epoch, m.recon_loss, m.dyn_loss,
                  m.var_kl_enc, m.var_kl_fwd, m.total);
    f << line;
  }
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace ldkl::train
