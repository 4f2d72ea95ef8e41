#pragma once

#include <cstdint>
#include <random>

#include "ldkl/tensor.hpp"

namespace ldkl::sim {

using Rng = std::mt19937_64;

struct PendulumParams {
  double mass = 1.0;
  double length = 1.0;
  double gravity = 10.0;
  double dt = 0.05;
  double torque_limit = 2.0;
  double dynamics_noise_std = 0.0;
  double velocity_limit = 8.0;

  void validate() const;
};

struct PendulumState {
  double angle = 0.0;     // (-pi, pi], 0 renders pointing up
  double velocity = 0.0;  // clamped to +-velocity_limit

  friend bool operator==(const PendulumState&, const PendulumState&) = default;
};

/// Variances of measurement, control, and dynamics noise.
struct NoiseConfig {
  double sigma_x2 = 0.0;
  double sigma_u2 = 0.0;
  double sigma_dyn2 = 0.0;

  void validate() const;
  friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

/// Maps any angle to (-pi, pi].
double wrap_angle(double angle);

/// -(1 / (m l)) (m g sin(angle) + u + disturbance), with u clamped to the torque limit.
double angular_acceleration(const PendulumState& s, double torque, const PendulumParams& p,
                            double disturbance = 0.0);

/// One semi-implicit Euler step; draws the dynamics disturbance from `rng` when its std is positive.
PendulumState step_dynamics(const PendulumState& s, double torque, const PendulumParams& p, Rng& rng);

double total_energy(const PendulumState& s, const PendulumParams& p);

/// Grayscale [H x W] image of an anti-aliased rod of length 0.4 min(H, W) and thickness 2 px
/// from the image center. Background 0, rod 1.
Tensor render(const PendulumState& s, std::size_t height, std::size_t width);

/// Element-wise i.i.d. N(0, sigma_x2) noise; no clamping. sigma_x2 == 0 returns x unchanged.
Tensor add_measurement_noise(const Tensor& x, double sigma_x2, Rng& rng);
double add_control_noise(double u, double sigma_u2, Rng& rng);

}  // namespace ldkl::sim
