#pragma once

// Transition datasets and their little-endian binary file format:
//
//   "LDKL" | u16 version | u32 H | u32 W | u32 channels | u64 count
//   | 7 x f64 PendulumParams | 3 x f64 NoiseConfig
//   then `count` records of
//   f32[2C*H*W] x_t | f32 u_t | f32[2C*H*W] x_{t+1} | 2 x f32 state_t | 2 x f32 state_{t+1}
//
// Frames are stored clean; measurement and control noise are applied at load or train time.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ldkl/pendulum.hpp"
#include "ldkl/tensor.hpp"

namespace ldkl::data {

inline constexpr char kDatasetMagic[4] = {'L', 'D', 'K', 'L'};
inline constexpr std::uint16_t kDatasetVersion = 1;

/// Two consecutive frames stacked along channels: [2C x H x W].
struct Measurement {
  Tensor frames;
  friend bool operator==(const Measurement&, const Measurement&) = default;
};

/// One (x_t, u_t, x_{t+1}) tuple. The true states are evaluation metadata only.
struct Transition {
  Measurement x_t;
  double u_t = 0.0;
  Measurement x_next;
  sim::PendulumState state_t;
  sim::PendulumState state_next;

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct DatasetHeader {
  std::uint16_t version = kDatasetVersion;
  std::uint32_t height = 32;
  std::uint32_t width = 32;
  std::uint32_t channels = 1;  // per frame
  std::uint64_t count = 0;
  sim::PendulumParams params;
  sim::NoiseConfig noise;

  std::size_t frame_values() const { return 2ull * channels * height * width; }
};

struct Dataset {
  DatasetHeader header;
  std::vector<Transition> transitions;
};

struct GenerateOptions {
  std::size_t count = 0;
  std::size_t episode_length = 50;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  sim::PendulumParams params;
  sim::NoiseConfig noise;  // sigma_dyn2 drives the simulated disturbance
  std::uint64_t seed = 0;
};

/// Simulates episodes from random initial states under uniformly random torques. Episodes
/// are independent RNG streams derived from (seed, episode index).
Dataset generate_dataset(const GenerateOptions& opts);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
/// Throws FormatError with the byte offset on bad magic, version, or truncation.
Dataset load_dataset(const std::filesystem::path& path);

/// Independent stream for one (seed, stream) pair.
sim::Rng make_stream(std::uint64_t seed, std::uint64_t stream);

}  // namespace ldkl::data
