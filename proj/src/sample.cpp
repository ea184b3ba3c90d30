#include "psam/sample.hpp"

#include "psam/errors.hpp"

namespace psam {

void AnnotatedSample::validate() const {
  validate_image(image);
  box.validate(image.height, image.width);
  if (annotations.empty()) throw ValidationError("sample " + std::to_string(id) + " has no annotations");
  for (const BinaryMask& m : annotations) {
    if (!same_extent(m, image))
      throw DimensionError("sample " + std::to_string(id) + ": annotation extent differs from the image");
    validate_binary(m);
  }
}

}  // namespace psam
