#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace psam::png {

// Single-channel raster; 8-bit samples are stored in the low byte.
struct GrayImage {
  int height = 0;
  int width = 0;
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;
};

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  RgbImage() = default;
  RgbImage(int h, int w, std::uint8_t fill = 255)
      : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}
  void set(int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

// All functions throw IoError naming the file on failure.
void write_gray(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_gray(const std::filesystem::path& path);
void write_rgb(const std::filesystem::path& path, const RgbImage& img);

}  // namespace psam::png
