#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "scarf/camera.hpp"

namespace scarf {

/// Row-major RGB image with linear values, nominally in [0, 1].
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<double> rgb;  // 3 * width * height

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h, double fill = 0.0) : width(w), height(h), rgb(3ull * w * h, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  Vec3 pixel(std::size_t i) const { return {rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]}; }
  void set_pixel(std::size_t i, const Vec3& c) {
    rgb[3 * i] = c.x;
    rgb[3 * i + 1] = c.y;
    rgb[3 * i + 2] = c.z;
  }
  bool operator==(const Image&) const = default;
};

/// 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
/// Reads 8-bit RGB or RGBA PNGs. RGBA is composited over white when
/// `white_background` is set, otherwise alpha is dropped. Sets `had_alpha`.
Image read_png(const std::filesystem::path& path, bool white_background = true, bool* had_alpha = nullptr);

/// Lossless dump: "SCRFIMG1", u32 width, u32 height, then width*height*3
/// little-endian float32 values in row-major RGB order.
void write_float_dump(const std::filesystem::path& path, const Image& image);
Image read_float_dump(const std::filesystem::path& path);

}  // namespace scarf
