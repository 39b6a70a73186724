#include "scarf/camera.hpp"

#include <algorithm>
#include <string>

#include "scarf/errors.hpp"

namespace scarf {

void validate_ray(const Ray& ray) {
  if (std::abs(ray.direction.norm() - 1.0) > 1e-6)
    throw ContractError("ray direction is not unit length (|d| = " + std::to_string(ray.direction.norm()) + ")");
  if (!(ray.near > 0.0) || !(ray.far > ray.near))
    throw ContractError("ray bounds need 0 < near < far, got near=" + std::to_string(ray.near) +
                        " far=" + std::to_string(ray.far));
}

Ray Camera::pixel_ray(std::uint32_t px, std::uint32_t py, double near, double far) const {
  const double u = (px + 0.5 - cx) / focal;
  const double v = -(py + 0.5 - cy) / focal;
  const Vec3 local{u, v, -1.0};
  const auto& r = rotation;
  const Vec3 world{r[0] * local.x + r[1] * local.y + r[2] * local.z, r[3] * local.x + r[4] * local.y + r[5] * local.z,
                   r[6] * local.x + r[7] * local.y + r[8] * local.z};
  return Ray{position, world.normalized(), near, far};
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_x, std::uint32_t width,
                       std::uint32_t height) {
  const Vec3 back = (eye - target).normalized();  // camera +z
  Vec3 right = up.cross(back);
  if (right.norm() < 1e-9) right = Vec3{1, 0, 0}.cross(back);
  right = right.normalized();
  const Vec3 true_up = back.cross(right);
  Camera cam;
  cam.rotation = {right.x, true_up.x, back.x, right.y, true_up.y, back.y, right.z, true_up.z, back.z};
  cam.position = eye;
  cam.width = width;
  cam.height = height;
  cam.focal = focal_from_fov(fov_x, width);
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  return cam;
}

double orthonormality_error(const std::array<double, 9>& r) {
  double worst = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[k * 3 + i] * r[k * 3 + j];
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

void validate_camera(const Camera& camera) {
  const double err = orthonormality_error(camera.rotation);
  if (!(err <= 1e-6)) throw ContractError("camera rotation is not orthonormal (error " + std::to_string(err) + ")");
  if (!(camera.focal > 0.0)) throw ContractError("camera focal length must be positive");
  if (camera.width == 0 || camera.height == 0) throw ContractError("camera image size must be positive");
}

}  // namespace scarf
