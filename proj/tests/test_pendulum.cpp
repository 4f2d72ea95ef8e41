#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "ldkl/dataset.hpp"
#include "ldkl/error.hpp"
#include "ldkl/pendulum.hpp"

using namespace ldkl;
using sim::PendulumParams;
using sim::PendulumState;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ldkl_test_pendulum_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

data::GenerateOptions small_options(std::size_t count, std::uint64_t seed) {
  data::GenerateOptions o;
  o.count = count;
  o.episode_length = 6;
  o.height = 16;
  o.width = 16;
  o.seed = seed;
  return o;
}

}  // namespace

TEST_CASE("dynamics closed forms") {
  const PendulumParams p;
  sim::Rng rng(1);

  SUBCASE("equilibrium is a fixed point") {
    const PendulumState s{0.0, 0.0};
    CHECK(sim::angular_acceleration(s, 0.0, p) == 0.0);
    CHECK(sim::step_dynamics(s, 0.0, p, rng) == s);
  }
  SUBCASE("horizontal rod accelerates at -g") {
    CHECK(sim::angular_acceleration({std::numbers::pi / 2, 0.0}, 0.0, p) == -10.0);
  }
  SUBCASE("torque is clamped, not rejected") {
    CHECK(sim::angular_acceleration({0.0, 0.0}, 50.0, p) == -2.0);
    CHECK(sim::angular_acceleration({0.0, 0.0}, -50.0, p) == 2.0);
  }
  SUBCASE("velocity is clamped") {
    const PendulumState s = sim::step_dynamics({std::numbers::pi / 2, 7.9}, -2.0, p, rng);
    CHECK(s.velocity <= p.velocity_limit);
  }
}

TEST_CASE("dynamics are deterministic") {
  PendulumParams p;
  p.dynamics_noise_std = 0.3;
  for (int seed : {0, 5}) {
    sim::Rng a(seed), b(seed);
    PendulumState sa{0.4, -0.2}, sb = sa;
    for (int i = 0; i < 200; ++i) {
      sa = sim::step_dynamics(sa, std::sin(0.1 * i), p, a);
      sb = sim::step_dynamics(sb, std::sin(0.1 * i), p, b);
    }
    CHECK(sa == sb);
  }
}

TEST_CASE("undriven energy has no secular drift") {
  // Semi-implicit Euler oscillates pointwise; compare mean energy over consecutive 100-step windows.
  const PendulumParams p;
  sim::Rng rng(0);
  for (double start : {0.3, 1.0, 2.0, 2.8}) {
    PendulumState s{start, 0.0};
    double previous = -1.0;
    for (int window = 0; window < 10; ++window) {
      double mean = 0.0;
      for (int i = 0; i < 100; ++i) {
        s = sim::step_dynamics(s, 0.0, p, rng);
        mean += sim::total_energy(s, p) / 100.0;
      }
      if (previous > 0.0) CHECK(std::abs(mean - previous) / previous < 0.02);
      previous = mean;
    }
  }
}

TEST_CASE("angles stay wrapped") {
  CHECK(sim::wrap_angle(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(sim::wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(sim::wrap_angle(3 * std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(sim::wrap_angle(0.25) == 0.25);

  PendulumParams p;
  p.dynamics_noise_std = 3.0;
  sim::Rng rng(11);
  std::uniform_real_distribution<double> torque(-5.0, 5.0);
  PendulumState s{3.0, 8.0};
  for (int i = 0; i < 20000; ++i) {
    s = sim::step_dynamics(s, torque(rng), p, rng);
    REQUIRE(s.angle > -std::numbers::pi);
    REQUIRE(s.angle <= std::numbers::pi);
    REQUIRE(std::abs(s.velocity) <= p.velocity_limit);
  }
}

TEST_CASE("renderer geometry") {
  const Tensor up = sim::render({0.0, 0.0}, 32, 32);
  CHECK(up.at(16 - 3, 16) == doctest::Approx(1.0));
  CHECK(up.at(16 + 3, 16) == 0.0);
  for (double v : up.storage()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(sim::render({0.0, 0.0}, 32, 32) == up);
  CHECK_THROWS_AS(sim::render({0.0, 0.0}, 8, 32), ConfigError);

  for (double phi : {0.3, 1.2, 2.5, -0.7}) {
    for (std::size_t h : {16, 21}) {
      const std::size_t w = h + 4;
      const Tensor a = sim::render({phi, 0.0}, h, w);
      const Tensor b = sim::render({-phi, 0.0}, h, w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) REQUIRE(std::abs(a.at(r, c) - b.at(r, w - 1 - c)) <= 1e-6);
    }
  }
}

TEST_CASE("measurement noise statistics") {
  sim::Rng rng(42);
  const Tensor clean = sim::render({0.7, 0.0}, 320, 320);  // 102400 pixels
  CHECK(sim::add_measurement_noise(clean, 0.0, rng) == clean);

  const Tensor noisy = sim::add_measurement_noise(clean, 0.25, rng);
  double mean = 0.0, sq = 0.0;
  bool out_of_range = false;
  for (std::size_t i = 0; i < clean.numel(); ++i) {
    const double d = noisy[i] - clean[i];
    mean += d;
    sq += d * d;
    out_of_range = out_of_range || noisy[i] < 0.0 || noisy[i] > 1.0;
  }
  const double n = static_cast<double>(clean.numel());
  mean /= n;
  const double var = sq / n - mean * mean;
  CHECK(mean >= -0.01);
  CHECK(mean <= 0.01);
  CHECK(var >= 0.24);
  CHECK(var <= 0.26);
  CHECK(out_of_range);  // no clamping
  CHECK_THROWS_AS(sim::add_measurement_noise(clean, -1.0, rng), ConfigError);
}

TEST_CASE("control noise statistics") {
  sim::Rng rng(9);
  CHECK(sim::add_control_noise(1.25, 0.0, rng) == 1.25);
  double sum = 0.0, sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double d = sim::add_control_noise(0.5, 0.49, rng) - 0.5;
    sum += d;
    sq += d * d;
  }
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  CHECK(sd >= 0.69);
  CHECK(sd <= 0.71);
}

TEST_CASE("dataset generation") {
  const data::Dataset ds = data::generate_dataset(small_options(17, 3));
  REQUIRE(ds.transitions.size() == 17);
  CHECK(ds.header.count == 17);
  const PendulumParams p;
  for (std::size_t i = 0; i < ds.transitions.size(); ++i) {
    const auto& t = ds.transitions[i];
    CHECK(t.x_t.frames.shape() == Shape{2, 16, 16});
    CHECK(std::abs(t.u_t) <= p.torque_limit);
    for (double v : t.x_t.frames.storage()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    // The second frame of x_t is the first frame of x_{t+1} within an episode.
    if ((i + 1) % 6 != 0 && i + 1 < ds.transitions.size())
      CHECK(ds.transitions[i + 1].state_t == t.state_next);
  }
  CHECK_THROWS_AS(data::generate_dataset(small_options(0, 3)), ConfigError);
}

TEST_CASE("dataset files round trip and are reproducible") {
  const auto a = temp_path("a.ldkl"), b = temp_path("b.ldkl");
  const data::Dataset ds = data::generate_dataset(small_options(10, 7));
  data::save_dataset(ds, a);
  data::save_dataset(data::generate_dataset(small_options(10, 7)), b);
  CHECK(slurp(a) == slurp(b));

  const data::Dataset back = data::load_dataset(a);
  CHECK(back.header.count == ds.header.count);
  CHECK(back.header.height == 16);
  CHECK(back.header.params.gravity == ds.header.params.gravity);
  CHECK(back.transitions == ds.transitions);

  data::save_dataset(data::generate_dataset(small_options(10, 8)), b);
  CHECK(slurp(a) != slurp(b));

  SUBCASE("truncated") {
    const std::string bytes = slurp(a);
    {
      std::ofstream out(b, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
    }
    CHECK_THROWS_AS(data::load_dataset(b), FormatError);
  }
  SUBCASE("bad magic") {
    std::string bytes = slurp(a);
    bytes[0] = 'X';
    {
      std::ofstream out(b, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
      data::load_dataset(b);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("LDKL") != std::string::npos);
    }
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(data::load_dataset(temp_path("nope.ldkl")), IoError); }

  std::filesystem::remove(a);
  std::filesystem::remove(b);
}
