#pragma once

// Latent world models over stacked frame pairs.
//
// Svdkl: conv encoder -> |z| independent sparse variational GPs (the encoder head), transpose
// conv decoder, and an MLP forward model -> a second bank of |z| GPs (the forward head).
// Vae: the same trunks with the GP heads replaced by a final layer emitting mean and log-std.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ldkl/autodiff.hpp"
#include "ldkl/gp.hpp"
#include "ldkl/pendulum.hpp"

namespace ldkl::model {

using ad::Tape;
using ad::Var;

enum class ModelKind { Svdkl, Vae };

std::string kind_name(ModelKind kind);
/// Parses "svdkl" or "vae"; throws ConfigError otherwise.
ModelKind parse_kind(const std::string& name);

struct ModelConfig {
  ModelKind kind = ModelKind::Svdkl;
  std::size_t height = 84;
  std::size_t width = 84;
  std::size_t channels_per_frame = 1;
  std::size_t latent_dim = 20;
  std::size_t inducing_points = 32;
  std::size_t conv_filters = 32;
  std::size_t enc_hidden = 256;
  std::size_t fwd_hidden = 512;
  double grid_lo = -1.0;
  double grid_hi = 1.0;
  double torque_limit = 2.0;  // u is divided by this before entering the forward net

  std::size_t input_channels() const { return 2 * channels_per_frame; }
  Shape measurement_shape() const { return {input_channels(), height, width}; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-element Gaussian over latent states; rows are batch elements: [B x |z|].
using LatentDistribution = gp::DiagonalGaussianVar;

class LatentModel {
 public:
  LatentModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ModelKind kind() const { return cfg_.kind; }
  ad::ParameterStore& params() { return store_; }
  const ad::ParameterStore& params() const { return store_; }

  /// Batch norm uses batch statistics in training mode and running buffers otherwise.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  /// x: [B, 2C, H, W] or a single [2C, H, W] measurement.
  LatentDistribution encode(Tape& tape, Var x);
  /// z: [B x |z|] or [|z|]. Returns the mean image [B, 2C, H, W]; the variance is fixed at 1.
  Var decode(Tape& tape, Var z);
  /// z: [B x |z|], u: [B] raw torques.
  LatentDistribution predict_next(Tape& tape, Var z, Var u);

  /// encode / predict_next restricted to the Vae family.
  LatentDistribution vae_encode(Tape& tape, Var x);
  LatentDistribution vae_predict_next(Tape& tape, Var z, Var u);

  /// Trunk outputs before the GP heads (Svdkl) or the mean/log-std layer output (Vae).
  Var encoder_features(Tape& tape, Var x);
  Var forward_features(Tape& tape, Var z, Var u);

  /// Sum over the |z| GPs of KL[q(v) || p(v)]; a zero constant for the Vae family.
  Var encoder_head_kl(Tape& tape);
  Var forward_head_kl(Tape& tape);

  const gp::InducingGrid& grid() const { return grid_; }

 private:
  Var linear(Tape& tape, Var x, const std::string& name);
  Var conv(Tape& tape, Var x, const std::string& name, std::size_t stride);
  Var tconv(Tape& tape, Var x, const std::string& name, std::size_t stride, std::size_t out_pad);
  Var norm(Tape& tape, Var x, const std::string& name);
  LatentDistribution gp_head(Tape& tape, Var features, const std::string& head);
  LatentDistribution gaussian_layer(Var out);
  Var head_kl(Tape& tape, const std::string& head);

  void add_linear(const std::string& name, std::size_t in, std::size_t out, sim::Rng& rng);
  void add_conv(const std::string& name, std::size_t in, std::size_t out, bool transposed, sim::Rng& rng);
  void add_norm(const std::string& name, std::size_t channels);
  void add_gp_head(const std::string& head);

  ModelConfig cfg_;
  ad::ParameterStore store_;
  gp::InducingGrid grid_;
  std::size_t enc_h_ = 0;
  std::size_t enc_w_ = 0;
  std::size_t out_pad_h_ = 0;
  std::size_t out_pad_w_ = 0;
  bool training_ = true;
};

/// z = mean + std * eps, eps ~ N(0, I).
Var sample_latent(const LatentDistribution& d, sim::Rng& rng);
/// z = mean + std * eps for a given eps of the same shape.
Var sample_latent(const LatentDistribution& d, const Tensor& eps);

}  // namespace ldkl::model
