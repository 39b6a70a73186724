#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace scarf {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const { return *this * (1.0 / norm()); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  bool operator==(const Vec3&) const = default;
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
  double near = 2.0;
  double far = 6.0;

  Vec3 at(double t) const { return origin + direction * t; }
};

/// Throws ContractError unless |d| = 1 within 1e-6 and 0 < near < far.
void validate_ray(const Ray& ray);

/// Pinhole camera with the OpenGL/NeRF convention: the camera looks down its
/// local -z axis with +y up. `rotation` is row-major world-from-camera.
struct Camera {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 position;
  double focal = 1.0;
  double cx = 0.5;
  double cy = 0.5;
  std::uint32_t width = 1;
  std::uint32_t height = 1;

  /// Ray through the centre of pixel (px, py); py grows downward.
  Ray pixel_ray(std::uint32_t px, std::uint32_t py, double near, double far) const;
  Vec3 forward() const { return {-rotation[2], -rotation[5], -rotation[8]}; }
  bool operator==(const Camera&) const = default;

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_x, std::uint32_t width,
                        std::uint32_t height);
  static double focal_from_fov(double fov_x, std::uint32_t width) { return 0.5 * width / std::tan(0.5 * fov_x); }
};

/// Max deviation of R^T R from identity.
double orthonormality_error(const std::array<double, 9>& r);

/// Throws ContractError when the rotation is not orthonormal within 1e-6 or
/// the intrinsics are invalid.
void validate_camera(const Camera& camera);

}  // namespace scarf
