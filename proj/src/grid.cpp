#include "psam/grid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "psam/errors.hpp"

namespace psam {

void BoxPrompt::validate(int height, int width) const {
  if (x1 < 0 || y1 < 0 || x2 > width || y2 > height)
    throw ValidationError("box " + str() + " lies outside the " + std::to_string(height) + "x" +
                          std::to_string(width) + " image");
  if (x1 >= x2 || y1 >= y2) throw ValidationError("degenerate box " + str());
}

std::string BoxPrompt::str() const {
  std::ostringstream os;
  os << '(' << x1 << ',' << y1 << ',' << x2 << ',' << y2 << ')';
  return os.str();
}

void validate_image(const Image& img) {
  if (img.height < 1 || img.width < 1 || img.values.size() != static_cast<std::size_t>(img.height) * img.width)
    throw DimensionError("image storage does not match its " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " extent");
  for (double v : img.values)
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("image intensity outside [0, 1]");
}

void validate_binary(const BinaryMask& mask) {
  if (mask.values.size() != static_cast<std::size_t>(mask.height) * mask.width)
    throw DimensionError("mask storage does not match its extent");
  if (std::any_of(mask.values.begin(), mask.values.end(), [](std::uint8_t v) { return v > 1; }))
    throw ValidationError("mask is not binary");
}

std::size_t count_foreground(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count(mask.values.begin(), mask.values.end(), std::uint8_t{1}));
}

}  // namespace psam
