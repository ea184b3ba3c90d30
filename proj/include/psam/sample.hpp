#pragma once

#include <optional>
#include <vector>

#include "psam/grid.hpp"

namespace psam {

// Ground truth the synthetic generator used for one sample.
struct OracleMeta {
  std::vector<double> thresholds;  // per annotator, on the noiseless blob profile
  std::vector<bool> missed;        // annotator reported no lesion
  double center_y = 0.0;
  double center_x = 0.0;
  double sigma_major = 0.0;
  double sigma_minor = 0.0;
  double angle = 0.0;
  bool fallback_box = false;  // union of annotations was empty

  friend bool operator==(const OracleMeta&, const OracleMeta&) = default;
};

struct AnnotatedSample {
  int id = 0;
  Image image;
  BoxPrompt box;
  std::vector<BinaryMask> annotations;
  std::optional<OracleMeta> oracle;

  int height() const { return image.height; }
  int width() const { return image.width; }
  // Throws when masks disagree with the image extent, the box is invalid or there are no annotations.
  void validate() const;

  friend bool operator==(const AnnotatedSample&, const AnnotatedSample&) = default;
};

}  // namespace psam
