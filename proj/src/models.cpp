#include "ldkl/models.hpp"

#include <cmath>

#include "ldkl/error.hpp"
#include "ldkl/kernels.hpp"
#include "ldkl/ops.hpp"

namespace ldkl::model {

using ad::ParamGroup;

std::string kind_name(ModelKind kind) { return kind == ModelKind::Svdkl ? "svdkl" : "vae"; }

ModelKind parse_kind(const std::string& name) {
  if (name == "svdkl") return ModelKind::Svdkl;
  if (name == "vae") return ModelKind::Vae;
  throw ConfigError("unknown model kind '" + name + "' (expected svdkl or vae)");
}

void ModelConfig::validate() const {
  if (height < 4 || width < 4) throw ConfigError("model image extent must be at least 4x4");
  if (channels_per_frame != 1 && channels_per_frame != 3) throw ConfigError("channels per frame must be 1 or 3");
  if (latent_dim == 0) throw ConfigError("latent dimension must be positive");
  if (conv_filters == 0 || enc_hidden == 0 || fwd_hidden == 0) throw ConfigError("layer widths must be positive");
  if (kind == ModelKind::Svdkl) {
    if (inducing_points < 2) throw ConfigError("at least 2 inducing points are required");
    if (!(grid_lo < grid_hi)) throw ConfigError("inducing grid needs grid_lo < grid_hi");
  }
  if (!(torque_limit > 0.0)) throw ConfigError("torque limit must be positive");
}

LatentModel::LatentModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  sim::Rng rng(seed);
  const std::size_t f = cfg_.conv_filters;
  const std::size_t zd = cfg_.latent_dim;
  const bool svdkl = cfg_.kind == ModelKind::Svdkl;
  const std::size_t out_width = svdkl ? zd : 2 * zd;

  enc_h_ = kernels::conv_out_extent(cfg_.height, 2, 1);
  enc_w_ = kernels::conv_out_extent(cfg_.width, 2, 1);
  // The last transpose conv maps enc -> 2 enc - 1 + out_pad.
  out_pad_h_ = cfg_.height - (2 * enc_h_ - 1);
  out_pad_w_ = cfg_.width - (2 * enc_w_ - 1);
  if (out_pad_h_ > 1 || out_pad_h_ != out_pad_w_)
    throw ConfigError("image height and width must have the same parity");
  const std::size_t flat = f * enc_h_ * enc_w_;

  add_conv("enc.conv1", cfg_.input_channels(), f, false, rng);
  add_conv("enc.conv2", f, f, false, rng);
  add_norm("enc.bn2", f);
  add_conv("enc.conv3", f, f, false, rng);
  add_conv("enc.conv4", f, f, false, rng);
  add_norm("enc.bn4", f);
  add_linear("enc.fc1", flat, cfg_.enc_hidden, rng);
  add_linear("enc.fc2", cfg_.enc_hidden, out_width, rng);

  add_linear("dec.fc", zd, flat, rng);
  add_conv("dec.tconv1", f, f, true, rng);
  add_norm("dec.bn1", f);
  add_conv("dec.tconv2", f, f, true, rng);
  add_conv("dec.tconv3", f, f, true, rng);
  add_norm("dec.bn3", f);
  add_conv("dec.tconv4", f, cfg_.input_channels(), true, rng);

  add_linear("fwd.fc1", zd + 1, cfg_.fwd_hidden, rng);
  add_linear("fwd.fc2", cfg_.fwd_hidden, cfg_.fwd_hidden, rng);
  add_linear("fwd.fc3", cfg_.fwd_hidden, out_width, rng);

  if (svdkl) {
    add_norm("enc.feat_bn", zd);
    add_norm("fwd.feat_bn", zd);
    grid_ = gp::make_inducing_grid(cfg_.inducing_points, zd, cfg_.grid_lo, cfg_.grid_hi);
    add_gp_head("enc");
    add_gp_head("fwd");
  }
}

void LatentModel::add_linear(const std::string& name, std::size_t in, std::size_t out, sim::Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor w({in, out});
  for (double& v : w.storage()) v = u(rng);
  Tensor b({out});
  for (double& v : b.storage()) v = u(rng);
  store_.add(name + ".w", std::move(w), ParamGroup::Network);
  store_.add(name + ".b", std::move(b), ParamGroup::Network);
}

void LatentModel::add_conv(const std::string& name, std::size_t in, std::size_t out, bool transposed,
                           sim::Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * 9));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor w(transposed ? Shape{in, out, 3, 3} : Shape{out, in, 3, 3});
  for (double& v : w.storage()) v = u(rng);
  Tensor b({out});
  for (double& v : b.storage()) v = u(rng);
  store_.add(name + ".w", std::move(w), ParamGroup::Network);
  store_.add(name + ".b", std::move(b), ParamGroup::Network);
}

void LatentModel::add_norm(const std::string& name, std::size_t channels) {
  store_.add(name + ".gamma", Tensor({channels}, 1.0), ParamGroup::Network);
  store_.add(name + ".beta", Tensor({channels}, 0.0), ParamGroup::Network);
  store_.add(name + ".running_mean", Tensor({channels}, 0.0), ParamGroup::Buffer);
  store_.add(name + ".running_var", Tensor({channels}, 1.0), ParamGroup::Buffer);
}

void LatentModel::add_gp_head(const std::string& head) {
  const std::size_t zd = cfg_.latent_dim;
  for (std::size_t i = 0; i < zd; ++i) {
    const std::string p = head + ".gp" + std::to_string(i);
    gp::GpHyperparams hp;
    hp.log_lengthscales = Tensor({zd}, 0.0);
    const gp::VariationalGaussian q = gp::VariationalGaussian::from_prior(grid_, hp);
    store_.add(p + ".log_ls", hp.log_lengthscales, ParamGroup::GaussianProcess);
    store_.add(p + ".log_sf", Tensor::scalar(hp.log_signal_std), ParamGroup::GaussianProcess);
    store_.add(p + ".log_noise", Tensor::scalar(hp.log_noise_std), ParamGroup::GaussianProcess);
    store_.add(p + ".mean", Tensor::scalar(hp.constant_mean), ParamGroup::GaussianProcess);
    store_.add(p + ".q_mean", q.mean, ParamGroup::GaussianProcess);
    store_.add(p + ".q_chol", q.chol_raw, ParamGroup::GaussianProcess);
  }
}

Var LatentModel::linear(Tape& tape, Var x, const std::string& name) {
  return ad::linear(x, tape.parameter(store_.get(name + ".w")), tape.parameter(store_.get(name + ".b")));
}

Var LatentModel::conv(Tape& tape, Var x, const std::string& name, std::size_t stride) {
  return ad::conv2d(x, tape.parameter(store_.get(name + ".w")), tape.parameter(store_.get(name + ".b")), stride, 1);
}

Var LatentModel::tconv(Tape& tape, Var x, const std::string& name, std::size_t stride, std::size_t out_pad) {
  return ad::conv_transpose2d(x, tape.parameter(store_.get(name + ".w")), tape.parameter(store_.get(name + ".b")),
                              stride, 1, out_pad);
}

Var LatentModel::norm(Tape& tape, Var x, const std::string& name) {
  ad::BatchNormOptions opts;
  opts.training = training_;
  return ad::batch_norm(x, tape.parameter(store_.get(name + ".gamma")), tape.parameter(store_.get(name + ".beta")),
                        store_.get(name + ".running_mean"), store_.get(name + ".running_var"), opts);
}

Var LatentModel::encoder_features(Tape& tape, Var x) {
  const Shape expected = cfg_.measurement_shape();
  if (x.shape().size() == 3) x = ad::reshape(x, {1, expected[0], expected[1], expected[2]});
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != expected[0] || s[2] != expected[1] || s[3] != expected[2])
    throw DimensionError("encode: measurement " + shape_string(s) + " does not match configured " +
                         shape_string(expected));
  const std::size_t batch = s[0];
  Var h = ad::elu(conv(tape, x, "enc.conv1", 2));
  h = ad::elu(norm(tape, conv(tape, h, "enc.conv2", 1), "enc.bn2"));
  h = ad::elu(conv(tape, h, "enc.conv3", 1));
  h = ad::elu(norm(tape, conv(tape, h, "enc.conv4", 1), "enc.bn4"));
  h = ad::reshape(h, {batch, cfg_.conv_filters * enc_h_ * enc_w_});
  h = ad::elu(linear(tape, h, "enc.fc1"));
  h = linear(tape, h, "enc.fc2");
  if (cfg_.kind == ModelKind::Svdkl) h = norm(tape, h, "enc.feat_bn");
  return h;
}

Var LatentModel::forward_features(Tape& tape, Var z, Var u) {
  if (z.shape().size() == 1) z = ad::reshape(z, {1, z.numel()});
  if (z.shape().size() != 2 || z.shape()[1] != cfg_.latent_dim)
    throw DimensionError("predict_next: latent " + shape_string(z.shape()) + " does not have " +
                         std::to_string(cfg_.latent_dim) + " columns");
  const std::size_t batch = z.shape()[0];
  if (u.numel() != batch)
    throw DimensionError("predict_next: " + std::to_string(u.numel()) + " controls for a batch of " +
                         std::to_string(batch));
  Var us = ad::reshape(ad::scale(u, 1.0 / cfg_.torque_limit), {batch, 1});
  Var h = ad::elu(linear(tape, ad::concat_cols({z, us}), "fwd.fc1"));
  h = ad::elu(linear(tape, h, "fwd.fc2"));
  h = linear(tape, h, "fwd.fc3");
  if (cfg_.kind == ModelKind::Svdkl) h = norm(tape, h, "fwd.feat_bn");
  return h;
}

LatentDistribution LatentModel::gp_head(Tape& tape, Var features, const std::string& head) {
  const std::size_t batch = features.shape()[0];
  std::vector<Var> means, stds;
  for (std::size_t i = 0; i < cfg_.latent_dim; ++i) {
    const std::string p = head + ".gp" + std::to_string(i);
    gp::GpHyperVars hp{tape.parameter(store_.get(p + ".log_ls")), tape.parameter(store_.get(p + ".log_sf")),
                       tape.parameter(store_.get(p + ".log_noise")), tape.parameter(store_.get(p + ".mean"))};
    gp::VariationalVars q{tape.parameter(store_.get(p + ".q_mean")), tape.parameter(store_.get(p + ".q_chol"))};
    gp::DiagonalGaussianVar d = gp::svgp_predict(features, grid_, q, hp);
    means.push_back(ad::reshape(d.mean, {batch, 1}));
    stds.push_back(ad::reshape(d.std, {batch, 1}));
  }
  return {ad::concat_cols(means), ad::concat_cols(stds)};
}

LatentDistribution LatentModel::gaussian_layer(Var out) {
  const std::size_t zd = cfg_.latent_dim;
  Var mean = ad::slice_cols(out, 0, zd);
  Var log_std = ad::slice_cols(out, zd, zd);
  return {mean, ad::sqrt_floor(ad::exp(ad::scale(log_std, 2.0)), gp::kStdFloor)};
}

LatentDistribution LatentModel::encode(Tape& tape, Var x) {
  Var features = encoder_features(tape, x);
  if (cfg_.kind == ModelKind::Vae) return gaussian_layer(features);
  return gp_head(tape, features, "enc");
}

LatentDistribution LatentModel::predict_next(Tape& tape, Var z, Var u) {
  Var features = forward_features(tape, z, u);
  if (cfg_.kind == ModelKind::Vae) return gaussian_layer(features);
  return gp_head(tape, features, "fwd");
}

LatentDistribution LatentModel::vae_encode(Tape& tape, Var x) {
  if (cfg_.kind != ModelKind::Vae) throw ContractError("vae_encode called on an svdkl model");
  return encode(tape, x);
}

LatentDistribution LatentModel::vae_predict_next(Tape& tape, Var z, Var u) {
  if (cfg_.kind != ModelKind::Vae) throw ContractError("vae_predict_next called on an svdkl model");
  return predict_next(tape, z, u);
}

Var LatentModel::decode(Tape& tape, Var z) {
  if (z.shape().size() == 1) z = ad::reshape(z, {1, z.numel()});
  if (z.shape().size() != 2 || z.shape()[1] != cfg_.latent_dim)
    throw DimensionError("decode: latent " + shape_string(z.shape()) + " does not have " +
                         std::to_string(cfg_.latent_dim) + " columns");
  const std::size_t batch = z.shape()[0];
  Var h = ad::elu(linear(tape, z, "dec.fc"));
  h = ad::reshape(h, {batch, cfg_.conv_filters, enc_h_, enc_w_});
  h = ad::elu(norm(tape, tconv(tape, h, "dec.tconv1", 1, 0), "dec.bn1"));
  h = ad::elu(tconv(tape, h, "dec.tconv2", 1, 0));
  h = ad::elu(norm(tape, tconv(tape, h, "dec.tconv3", 1, 0), "dec.bn3"));
  return tconv(tape, h, "dec.tconv4", 2, out_pad_h_);
}

Var LatentModel::head_kl(Tape& tape, const std::string& head) {
  if (cfg_.kind == ModelKind::Vae) return tape.constant(Tensor::scalar(0.0));
  Var total;
  for (std::size_t i = 0; i < cfg_.latent_dim; ++i) {
    const std::string p = head + ".gp" + std::to_string(i);
    gp::GpHyperVars hp{tape.parameter(store_.get(p + ".log_ls")), tape.parameter(store_.get(p + ".log_sf")),
                       tape.parameter(store_.get(p + ".log_noise")), tape.parameter(store_.get(p + ".mean"))};
    gp::VariationalVars q{tape.parameter(store_.get(p + ".q_mean")), tape.parameter(store_.get(p + ".q_chol"))};
    Var kl = gp::svgp_kl_term(tape, grid_, q, hp);
    total = total.valid() ? ad::add(total, kl) : kl;
  }
  return total;
}

Var LatentModel::encoder_head_kl(Tape& tape) { return head_kl(tape, "enc"); }
Var LatentModel::forward_head_kl(Tape& tape) { return head_kl(tape, "fwd"); }

Var sample_latent(const LatentDistribution& d, const Tensor& eps) {
  if (!eps.same_shape(d.mean.value()))
    throw DimensionError("sample_latent: noise " + shape_string(eps.shape()) + " vs latent " +
                         shape_string(d.mean.shape()));
  return ad::add(d.mean, ad::mul(d.std, d.mean.tape()->constant(eps)));
}

Var sample_latent(const LatentDistribution& d, sim::Rng& rng) {
  Tensor eps(d.mean.shape());
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : eps.storage()) v = n(rng);
  return sample_latent(d, eps);
}

}  // namespace ldkl::model
