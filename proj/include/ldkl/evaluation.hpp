#pragma once

// Held-out evaluation: reconstruction quality, denoising gain, latent/state correlations,
// predictive uncertainty, and one-step prediction against the persistence baseline.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ldkl/dataset.hpp"
#include "ldkl/models.hpp"

namespace ldkl::eval {

/// Where the Monte Carlo average happens: over latent samples before decoding, or over the
/// decoded images.
enum class AvgMode { Latent, Image };

std::string avg_mode_name(AvgMode mode);
AvgMode parse_avg_mode(const std::string& name);

struct EvalOptions {
  double sigma_x2 = 0.0;
  double sigma_u2 = 0.0;
  AvgMode avg = AvgMode::Image;
  std::size_t samples = 10;
  std::size_t batch_size = 64;
  std::size_t grid_rows = 8;  // test items shown in the image grid
  std::uint64_t seed = 0;

  void validate() const;
};

/// Pearson correlations of each latent dimension against sin(angle), cos(angle), and velocity.
struct CorrelationResult {
  std::vector<double> sin;
  std::vector<double> cos;
  std::vector<double> velocity;
  std::vector<bool> degenerate;  // zero-variance dimensions, reported as correlation 0
  double max_abs_sin = 0.0;
  double max_abs_cos = 0.0;
  double max_abs_velocity = 0.0;
};

/// means: [N x |z|]. Requires N >= 30.
CorrelationResult latent_correlation(const Tensor& means, std::span<const sim::PendulumState> states);

/// 10 log10(1 / mse) for unit peak.
double psnr(double mse);

struct EvalRow {
  std::string model;
  double sigma_x2 = 0.0;
  double sigma_u2 = 0.0;
  double sigma_dyn2 = 0.0;
  std::size_t count = 0;
  double recon_mse = 0.0;
  double recon_psnr = 0.0;
  double noisy_psnr = 0.0;
  double denoising_gain = 0.0;
  double next_mse = 0.0;
  double persistence_mse = 0.0;
  double enc_std = 0.0;  // mean predictive std of z_t
  double fwd_std = 0.0;  // mean predictive std of z_{t+1}
  CorrelationResult corr;
};

/// Optional by-products of an evaluation pass.
struct EvalArtifacts {
  Tensor grid;            // clean | noisy | reconstruction | next-step, one test item per row
  Tensor latent_means;    // [N x |z|]
  Tensor latent_stds;     // [N x |z|]
};

/// Runs the model in eval mode over the whole test set.
EvalRow evaluate(model::LatentModel& model, const data::Dataset& test, const EvalOptions& opts,
                 EvalArtifacts* artifacts = nullptr);

struct UqLevel {
  double sigma_x2 = 0.0;
  double sigma_u2 = 0.0;
};

struct UqRow {
  double sigma_x2 = 0.0;
  double sigma_u2 = 0.0;
  double enc_std = 0.0;
  double fwd_std = 0.0;
};

/// Mean predictive std of the encoder and forward model per noise level, with z_t at the
/// encoder mean.
std::vector<UqRow> uq_sweep(model::LatentModel& model, const data::Dataset& test, std::span<const UqLevel> levels,
                            std::uint64_t seed, std::size_t batch_size = 64);

void write_report_csv(const std::vector<EvalRow>& rows, const std::filesystem::path& path);
void write_uq_csv(const std::vector<UqRow>& rows, const std::filesystem::path& path);
/// Side-by-side table, one column per model.
void write_compare_csv(const std::vector<EvalRow>& rows, const std::filesystem::path& path);
/// index, angle, velocity, then mean and std per latent dimension.
void write_latents_csv(const EvalArtifacts& artifacts, const data::Dataset& test, const std::filesystem::path& path);

}  // namespace ldkl::eval
