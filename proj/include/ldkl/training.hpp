#pragma once

// Loss assembly and the minibatch training loop.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "ldkl/dataset.hpp"
#include "ldkl/models.hpp"

namespace ldkl::train {

using ad::Tape;
using ad::Var;
using model::LatentDistribution;
using model::LatentModel;

struct TrainConfig {
  double lr_nn = 3e-4;
  double lr_gp = 1e-2;
  double weight_decay = 1e-2;
  double alpha = 0.9;  // KL balancing weight
  double beta = 1.0;   // dynamics loss weight
  double lambda_var = 1.0;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  sim::NoiseConfig noise;  // sigma_x2 and sigma_u2 are injected per batch

  void validate() const;
};

/// Model inputs for one minibatch. Never carries true states.
struct Batch {
  Tensor x_t;     // [B, 2C, H, W]
  Tensor u;       // [B]
  Tensor x_next;  // [B, 2C, H, W]
  bool tainted = false;  // set if true-state metadata leaked into the batch

  std::size_t size() const { return u.numel(); }
};

/// Gathers transitions, adding fresh measurement noise to both measurements and control noise
/// to u.
Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> indices, const sim::NoiseConfig& noise,
                 sim::Rng& rng);

/// 1/2 sum (x - x_hat)^2 + D/2 log(2 pi) per element, averaged over the batch.
Var reconstruction_nll(Var x, Var x_hat);

/// alpha KL[sg(post) || prior] + (1 - alpha) KL[post || sg(prior)], summed over latent dims and
/// averaged over the batch.
Var balanced_kl(const LatentDistribution& posterior, const LatentDistribution& prior, double alpha);

/// Reconstruction loss with one reparametrized latent sample per element.
Var recon_loss(Tape& tape, LatentModel& model, Var x_t, sim::Rng& rng);

/// Dynamics loss with one sampled z_t per element.
Var dyn_loss(Tape& tape, LatentModel& model, Var x_t, Var u, Var x_next, double alpha, sim::Rng& rng);

struct LossTerms {
  Var recon;
  Var dyn;
  Var var_kl_enc;  // already multiplied by kl_scale
  Var var_kl_fwd;
  Var total;
};

/// recon + beta dyn + lambda_var (var_kl_enc + var_kl_fwd). The encoder runs once over x_t and
/// x_next together. `kl_scale` spreads the variational terms over the training set (1 / N).
LossTerms total_loss(Tape& tape, LatentModel& model, const Batch& batch, const TrainConfig& cfg, double kl_scale,
                     sim::Rng& rng);

struct EpochMetrics {
  std::size_t epoch = 0;
  double recon_loss = 0.0;
  double dyn_loss = 0.0;
  double var_kl_enc = 0.0;
  double var_kl_fwd = 0.0;
  double total = 0.0;
};

struct TrainOutputs {
  std::filesystem::path checkpoint;  // empty: no checkpoints
  std::filesystem::path metrics_csv;  // empty: no metrics file
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Shuffled minibatch training. Batches smaller than 2 are dropped since batch norm needs
/// batch statistics. Deterministic for a given model seed and cfg.seed.
std::vector<EpochMetrics> train(LatentModel& model, const data::Dataset& ds, const TrainConfig& cfg,
                                const TrainOutputs& out = {});

void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::filesystem::path& path);

}  // namespace ldkl::train
