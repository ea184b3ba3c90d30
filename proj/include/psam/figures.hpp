#pragma once

#include <vector>

#include "psam/image_io.hpp"
#include "psam/sample.hpp"
#include "psam/training.hpp"

namespace psam {

// Line plot of per-step total loss (grey), its 50-step moving average (black), the reconstruction
// term (blue) and beta * KL (red). Axes start at step 1 and loss 0.
png::RgbImage loss_curve_figure(const TrainHistory& history, int height = 240, int width = 480);

// Top row: the input with its box in red, then the annotator masks. Following rows: the samples,
// wrapped at `per_row` tiles. Tiles are upscaled by `scale`.
png::RgbImage sample_grid_figure(const Image& image, const BoxPrompt& box, const std::vector<BinaryMask>& annotations,
                                 const std::vector<BinaryMask>& samples, int per_row = 8, int scale = 2);

}  // namespace psam
