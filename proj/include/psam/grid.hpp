#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace psam {

// Row-major H x W raster.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return values.size(); }
  T& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

// Normalized intensities in [0, 1].
using Image = Grid<double>;
// 0 / 1 per pixel.
using BinaryMask = Grid<std::uint8_t>;
// Per-pixel foreground probability.
using ProbMask = Grid<double>;
// Per-pixel pre-sigmoid scores.
using Logits = Grid<double>;

// Box prompt with exclusive lower-right corner: pixels x1 <= x < x2, y1 <= y < y2.
struct BoxPrompt {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;

  // Throws ValidationError unless 0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height.
  void validate(int height, int width) const;
  std::string str() const;

  friend bool operator==(const BoxPrompt&, const BoxPrompt&) = default;
};

void validate_image(const Image& img);
// Throws ValidationError when any value is not 0 or 1.
void validate_binary(const BinaryMask& mask);
std::size_t count_foreground(const BinaryMask& mask);

template <typename A, typename B>
bool same_extent(const Grid<A>& a, const Grid<B>& b) {
  return a.height == b.height && a.width == b.width && a.values.size() == b.values.size();
}

}  // namespace psam
