#include "psam/image_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

#include "psam/errors.hpp"

namespace psam::png {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError(path.string() + ": cannot open");
  return f;
}

void silent_warning(png_structp, png_const_charp) {}

// libpng reports errors through longjmp; these helpers keep the setjmp frames free of
// objects with non-trivial destructors created after the jump point.
bool write_rows(std::FILE* fp, int width, int height, int depth, int color, std::uint8_t* const* rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, silent_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(rows));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct ReadResult {
  bool ok = false;
  const char* why = "corrupt PNG data";
};

ReadResult read_rows(std::FILE* fp, GrayImage& out, std::vector<std::uint8_t>& buffer) {
  ReadResult r;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, silent_warning);
  if (!png) return r;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return r;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16) ||
      png_get_interlace_type(png, info) != PNG_INTERLACE_NONE) {
    png_destroy_read_struct(&png, &info, nullptr);
    r.why = "expected a non-interlaced 8- or 16-bit grayscale PNG";
    return r;
  }
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = depth;
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer.resize(row_bytes * static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) png_read_row(png, buffer.data() + row_bytes * static_cast<std::size_t>(y), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  r.ok = true;
  return r;
}

}  // namespace

void RgbImage::set(int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (y < 0 || x < 0 || y >= height || x >= width) return;
  const std::size_t at = (static_cast<std::size_t>(y) * width + x) * 3;
  rgb[at] = r;
  rgb[at + 1] = g;
  rgb[at + 2] = b;
}

void write_gray(const std::filesystem::path& path, const GrayImage& img) {
  if (img.bit_depth != 8 && img.bit_depth != 16) throw IoError(path.string() + ": unsupported bit depth");
  if (img.samples.size() != static_cast<std::size_t>(img.height) * img.width)
    throw IoError(path.string() + ": sample count does not match extent");
  const std::size_t bpp = img.bit_depth / 8;
  std::vector<std::uint8_t> bytes(img.samples.size() * bpp);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bpp == 2) {
      bytes[2 * i] = static_cast<std::uint8_t>(img.samples[i] >> 8);  // PNG is big-endian
      bytes[2 * i + 1] = static_cast<std::uint8_t>(img.samples[i] & 0xff);
    } else {
      bytes[i] = static_cast<std::uint8_t>(img.samples[i]);
    }
  }
  std::vector<std::uint8_t*> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + y * img.width * bpp;
  File f = open(path, "wb");
  if (!write_rows(f.get(), img.width, img.height, img.bit_depth, PNG_COLOR_TYPE_GRAY, rows.data()))
    throw IoError(path.string() + ": PNG encoding failed");
}

GrayImage read_gray(const std::filesystem::path& path) {
  File f = open(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, sizeof sig, f.get()) != sizeof sig || png_sig_cmp(sig, 0, sizeof sig) != 0)
    throw IoError(path.string() + ": not a PNG file");
  std::rewind(f.get());
  GrayImage img;
  std::vector<std::uint8_t> bytes;
  const ReadResult r = read_rows(f.get(), img, bytes);
  if (!r.ok) throw IoError(path.string() + ": " + r.why);
  img.samples.resize(static_cast<std::size_t>(img.height) * img.width);
  for (std::size_t i = 0; i < img.samples.size(); ++i)
    img.samples[i] = img.bit_depth == 16 ? static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]) : bytes[i];
  return img;
}

void write_rgb(const std::filesystem::path& path, const RgbImage& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.height) * img.width * 3)
    throw IoError(path.string() + ": sample count does not match extent");
  std::vector<std::uint8_t*> rows(static_cast<std::size_t>(img.height));
  auto* base = const_cast<std::uint8_t*>(img.rgb.data());
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = base + static_cast<std::size_t>(y) * img.width * 3;
  File f = open(path, "wb");
  if (!write_rows(f.get(), img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows.data()))
    throw IoError(path.string() + ": PNG encoding failed");
}

}  // namespace psam::png
