#include "psam/figures.hpp"

#include <algorithm>
#include <cmath>

#include "psam/errors.hpp"

namespace psam {

namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kGrey{190, 190, 190};
constexpr Rgb kBlack{0, 0, 0};
constexpr Rgb kBlue{40, 90, 200};
constexpr Rgb kRed{200, 40, 40};
constexpr Rgb kAxis{90, 90, 90};

void put(png::RgbImage& img, int y, int x, Rgb c) {
  if (y >= 0 && y < img.height && x >= 0 && x < img.width) img.set(y, x, c.r, c.g, c.b);
}

// Bresenham segment.
void line(png::RgbImage& img, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put(img, y0, x0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

template <typename F>
void tile(png::RgbImage& img, int top, int left, int h, int w, int scale, F&& shade) {
  for (int y = 0; y < h * scale; ++y)
    for (int x = 0; x < w * scale; ++x) {
      const std::uint8_t v = shade(y / scale, x / scale);
      put(img, top + y, left + x, {v, v, v});
    }
}

}  // namespace

png::RgbImage loss_curve_figure(const TrainHistory& history, int height, int width) {
  if (history.steps.empty()) throw ValidationError("loss_curve_figure: empty history");
  png::RgbImage img(height, width);
  const int margin = 12;
  const int plot_w = width - 2 * margin, plot_h = height - 2 * margin;
  const int n = static_cast<int>(history.steps.size());

  double top = 0.0;
  for (const StepRecord& s : history.steps) top = std::max({top, s.loss.total, s.loss.recon});
  if (!(top > 0.0) || !std::isfinite(top)) top = 1.0;

  auto px = [&](int step) { return margin + (n == 1 ? 0 : (step - 1) * (plot_w - 1) / (n - 1)); };
  auto py = [&](double v) {
    const double f = std::clamp(v / top, 0.0, 1.0);
    return margin + plot_h - 1 - static_cast<int>(std::lround(f * (plot_h - 1)));
  };
  auto series = [&](Rgb c, auto value) {
    for (int s = 2; s <= n; ++s) line(img, px(s - 1), py(value(s - 1)), px(s), py(value(s)), c);
    if (n == 1) put(img, py(value(1)), px(1), c);
  };
  auto at = [&](int s) -> const LossBreakdown& { return history.steps[static_cast<std::size_t>(s - 1)].loss; };

  line(img, margin, margin, margin, margin + plot_h - 1, kAxis);
  line(img, margin, margin + plot_h - 1, margin + plot_w - 1, margin + plot_h - 1, kAxis);
  series(kGrey, [&](int s) { return at(s).total; });
  series(kBlue, [&](int s) { return at(s).recon; });
  series(kRed, [&](int s) { return at(s).beta * at(s).kl; });
  series(kBlack, [&](int s) { return history.smoothed_total(s); });
  return img;
}

png::RgbImage sample_grid_figure(const Image& image, const BoxPrompt& box, const std::vector<BinaryMask>& annotations,
                                 const std::vector<BinaryMask>& samples, int per_row, int scale) {
  if (per_row < 1 || scale < 1) throw ValidationError("sample_grid_figure: per_row and scale must be >= 1");
  const int h = image.height, w = image.width, gap = 4;
  const int top_tiles = 1 + static_cast<int>(annotations.size());
  const int sample_rows = (static_cast<int>(samples.size()) + per_row - 1) / per_row;
  const int cols = std::max(top_tiles, std::min(per_row, static_cast<int>(samples.size())));
  const int tile_h = h * scale + gap, tile_w = w * scale + gap;
  png::RgbImage img(gap + (1 + sample_rows) * tile_h, gap + cols * tile_w);

  auto origin = [&](int row, int col) { return std::pair{gap + row * tile_h, gap + col * tile_w}; };
  auto mask_tile = [&](int row, int col, const BinaryMask& m) {
    if (m.height != h || m.width != w) throw DimensionError("sample_grid_figure: mask extent differs from image");
    const auto [t, l] = origin(row, col);
    tile(img, t, l, h, w, scale, [&](int y, int x) -> std::uint8_t { return m.at(y, x) ? 255 : 0; });
  };

  {
    const auto [t, l] = origin(0, 0);
    tile(img, t, l, h, w, scale, [&](int y, int x) {
      return static_cast<std::uint8_t>(std::lround(std::clamp(image.at(y, x), 0.0, 1.0) * 255.0));
    });
    const int y0 = t + box.y1 * scale, y1 = t + box.y2 * scale - 1;
    const int x0 = l + box.x1 * scale, x1 = l + box.x2 * scale - 1;
    line(img, x0, y0, x1, y0, kRed);
    line(img, x0, y1, x1, y1, kRed);
    line(img, x0, y0, x0, y1, kRed);
    line(img, x1, y0, x1, y1, kRed);
  }
  for (std::size_t k = 0; k < annotations.size(); ++k) mask_tile(0, 1 + static_cast<int>(k), annotations[k]);
  for (std::size_t k = 0; k < samples.size(); ++k)
    mask_tile(1 + static_cast<int>(k) / per_row, static_cast<int>(k) % per_row, samples[k]);
  return img;
}

}  // namespace psam
