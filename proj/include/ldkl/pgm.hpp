#pragma once

// Binary portable graymap (P5) output and simple image tiling.

#include <cstddef>
#include <filesystem>
#include <vector>

#include "ldkl/tensor.hpp"

namespace ldkl::img {

/// Writes an [H x W] image. Values are clamped to [0, 1] and rounded to 8 bits.
void write_pgm(const std::filesystem::path& path, const Tensor& image);

/// Reads a P5 file with maxval 255 back into [0, 1] values.
Tensor read_pgm(const std::filesystem::path& path);

/// Tiles equally sized [H x W] cells into a grid, rows of cells top to bottom, with `gap`
/// pixels of `gap_value` between cells.
Tensor tile(const std::vector<std::vector<Tensor>>& cells, std::size_t gap = 1, double gap_value = 1.0);

}  // namespace ldkl::img
