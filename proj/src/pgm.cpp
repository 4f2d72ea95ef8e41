#include "ldkl/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "ldkl/error.hpp"

namespace ldkl::img {

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 2) throw DimensionError("write_pgm: expected [H x W], got " + shape_string(image.shape()));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::string row(image.numel(), '\0');
  for (std::size_t i = 0; i < image.numel(); ++i)
    row[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0)));
  f.write(row.data(), static_cast<std::streamsize>(row.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w == 0 || h == 0)
    throw FormatError(path.string() + ": not an 8-bit P5 graymap");
  f.get();
  std::string data(w * h, '\0');
  f.read(data.data(), static_cast<std::streamsize>(data.size()));
  if (static_cast<std::size_t>(f.gcount()) != data.size())
    throw FormatError(path.string() + ": truncated pixel data");
  Tensor out({h, w});
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<unsigned char>(data[i]) / 255.0;
  return out;
}

Tensor tile(const std::vector<std::vector<Tensor>>& cells, std::size_t gap, double gap_value) {
  if (cells.empty() || cells.front().empty()) throw DimensionError("tile: no cells");
  const std::size_t rows = cells.size();
  const std::size_t cols = cells.front().size();
  const std::size_t h = cells[0][0].dim(0);
  const std::size_t w = cells[0][0].dim(1);
  Tensor out({rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap}, gap_value);
  const std::size_t width = out.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cells[r].size() != cols) throw DimensionError("tile: ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      const Tensor& cell = cells[r][c];
      if (cell.rank() != 2 || cell.dim(0) != h || cell.dim(1) != w)
        throw DimensionError("tile: cell " + shape_string(cell.shape()) + " differs from [" + std::to_string(h) +
                             "x" + std::to_string(w) + "]");
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out[(r * (h + gap) + i) * width + c * (w + gap) + j] = cell[i * w + j];
    }
  }
  return out;
}

}  // namespace ldkl::img
