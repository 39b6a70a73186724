#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "scarf/errors.hpp"
#include "scarf/image.hpp"

namespace scarf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  std::vector<std::uint8_t> bytes(image.rgb.size());
  std::transform(image.rgb.begin(), image.rgb.end(), bytes.begin(), to_byte);
  std::vector<png_bytep> rows(image.height);
  for (std::uint32_t y = 0; y < image.height; ++y) rows[y] = bytes.data() + 3ull * y * image.width;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path, bool white_background, bool* had_alpha) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open image '" + path.string() + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw DataError("'" + path.string() + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  std::vector<std::uint8_t> bytes;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  const std::size_t channels = png_get_channels(png, info);
  bytes.resize(channels * width * height);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = bytes.data() + channels * width * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(width, height);
  const bool alpha = channels == 4;
  if (had_alpha) *had_alpha = alpha;
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const std::uint8_t* p = bytes.data() + channels * i;
    const double a = alpha ? p[3] / 255.0 : 1.0;
    for (int c = 0; c < 3; ++c) {
      double v = p[c] / 255.0;
      if (alpha && white_background) v = v * a + (1.0 - a);
      img.rgb[3 * i + c] = v;
    }
  }
  return img;
}

void write_float_dump(const std::filesystem::path& path, const Image& image) {
  static_assert(std::endian::native == std::endian::little, "float dump assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write("SCRFIMG1", 8);
  out.write(reinterpret_cast<const char*>(&image.width), 4);
  out.write(reinterpret_cast<const char*>(&image.height), 4);
  for (double v : image.rgb) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Image read_float_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  char magic[8];
  Image img;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&img.width), 4);
  in.read(reinterpret_cast<char*>(&img.height), 4);
  if (!in || std::memcmp(magic, "SCRFIMG1", 8) != 0) throw DataError("'" + path.string() + "' is not a float dump");
  img.rgb.resize(3ull * img.width * img.height);
  for (double& v : img.rgb) {
    float f;
    in.read(reinterpret_cast<char*>(&f), 4);
    v = f;
  }
  if (!in) throw DataError("truncated float dump '" + path.string() + "'");
  return img;
}

}  // namespace scarf
