#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace sonic {

/// Single-channel range-bearing intensity grid. Rows index range bins,
/// columns index bearing bins.
struct PolarImage {
  int rows = 0;
  int cols = 0;
  std::vector<float> pixels;

  PolarImage() = default;
  PolarImage(int r, int c, float fill = 0.0f)
      : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * c, fill) {}

  float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }

  bool operator==(const PolarImage&) const = default;
};

/// .img layout: "SNRI", u32 rows, u32 cols, little-endian f32 row-major.
void write_image(const std::filesystem::path& path, const PolarImage& image);
PolarImage read_image(const std::filesystem::path& path);

}  // namespace sonic
