#include "ldkl/pendulum.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ldkl/error.hpp"

namespace ldkl::sim {

void PendulumParams::validate() const {
  if (!(mass > 0.0) || !(length > 0.0) || !(gravity > 0.0) || !(dt > 0.0))
    throw ConfigError("pendulum mass, length, gravity and dt must be positive");
  if (!(torque_limit >= 0.0) || !(dynamics_noise_std >= 0.0) || !(velocity_limit > 0.0))
    throw ConfigError("pendulum torque limit and dynamics noise must be non-negative");
}

void NoiseConfig::validate() const {
  if (!(sigma_x2 >= 0.0) || !(sigma_u2 >= 0.0) || !(sigma_dyn2 >= 0.0))
    throw ConfigError("noise variances must be non-negative");
}

double wrap_angle(double angle) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(angle + std::numbers::pi, two_pi);
  if (w <= 0.0) w += two_pi;
  return w - std::numbers::pi;
}

double angular_acceleration(const PendulumState& s, double torque, const PendulumParams& p, double disturbance) {
  const double u = std::clamp(torque, -p.torque_limit, p.torque_limit);
  return -(p.mass * p.gravity * std::sin(s.angle) + u + disturbance) / (p.mass * p.length);
}

PendulumState step_dynamics(const PendulumState& s, double torque, const PendulumParams& p, Rng& rng) {
  double disturbance = 0.0;
  if (p.dynamics_noise_std > 0.0) disturbance = std::normal_distribution<double>(0.0, p.dynamics_noise_std)(rng);
  const double acc = angular_acceleration(s, torque, p, disturbance);
  PendulumState next;
  next.velocity = std::clamp(s.velocity + acc * p.dt, -p.velocity_limit, p.velocity_limit);
  next.angle = wrap_angle(s.angle + next.velocity * p.dt);
  return next;
}

double total_energy(const PendulumState& s, const PendulumParams& p) {
  return 0.5 * p.mass * p.length * p.length * s.velocity * s.velocity +
         p.mass * p.gravity * p.length * (1.0 - std::cos(s.angle));
}

Tensor render(const PendulumState& s, std::size_t height, std::size_t width) {
  if (height < 16 || width < 16) throw ConfigError("render: image extents must be at least 16");
  const double cx = 0.5 * static_cast<double>(width);
  const double cy = 0.5 * static_cast<double>(height);
  const double rod = 0.4 * static_cast<double>(std::min(height, width));
  const double half_thickness = 1.0;
  const double dx = std::sin(s.angle), dy = -std::cos(s.angle);

  Tensor img({height, width});
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double px = static_cast<double>(c) + 0.5 - cx;
      const double py = static_cast<double>(r) + 0.5 - cy;
      const double t = std::clamp(px * dx + py * dy, 0.0, rod);
      const double ex = px - t * dx, ey = py - t * dy;
      const double dist = std::sqrt(ex * ex + ey * ey);
      img.at(r, c) = std::clamp(half_thickness + 0.5 - dist, 0.0, 1.0);
    }
  }
  return img;
}

Tensor add_measurement_noise(const Tensor& x, double sigma_x2, Rng& rng) {
  if (sigma_x2 < 0.0) throw ConfigError("measurement noise variance must be non-negative");
  Tensor out = x;
  if (sigma_x2 == 0.0) return out;
  std::normal_distribution<double> noise(0.0, std::sqrt(sigma_x2));
  for (double& v : out.storage()) v += noise(rng);
  return out;
}

double add_control_noise(double u, double sigma_u2, Rng& rng) {
  if (sigma_u2 < 0.0) throw ConfigError("control noise variance must be non-negative");
  if (sigma_u2 == 0.0) return u;
  return u + std::normal_distribution<double>(0.0, std::sqrt(sigma_u2))(rng);
}

}  // namespace ldkl::sim
