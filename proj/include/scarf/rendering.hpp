#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "scarf/camera.hpp"
#include "scarf/image.hpp"
#include "scarf/model.hpp"
#include "scarf/prng.hpp"
#include "scarf/tape.hpp"

namespace scarf {

/// One draw per bin [near + k/N (far - near), near + (k+1)/N (far - near)).
/// A null prng places every sample at its bin midpoint.
std::vector<double> stratified_sample(const Ray& ray, std::size_t n, Prng* prng);

/// delta_i = t_{i+1} - t_i, and far - t_N for the last sample.
std::vector<double> sample_deltas(std::span<const double> t, double far);

struct CompositeResult {
  Vec3 color;
  std::vector<double> weights;
  std::vector<double> transmittance;  // T_1 .. T_{N+1}
  double depth = 0.0;  // sum w_i t_i
};

/// Quadrature along one ray. `rgb` holds 3 values per sample.
CompositeResult composite(std::span<const double> sigma, std::span<const double> rgb, std::span<const double> t,
                          std::span<const double> delta, bool white_background);

/// Rays with their sample depths, flattened ray-major for batched queries.
struct SampleBatch {
  std::size_t ray_count = 0;
  std::size_t samples_per_ray = 0;
  Matrix depths;  // R x N
  Matrix deltas;  // R x N
  Matrix positions;  // R*N x 3
  Matrix directions;  // R*N x 3
};

/// Each ray draws from prng->split(stream_offset + i), so a ray's samples do
/// not depend on which batch it is evaluated in.
SampleBatch make_sample_batch(std::span<const Ray> rays, std::size_t n, Prng* prng, std::uint64_t stream_offset = 0);

/// Differentiable compositing of sigma (R*N x 1) and rgb (R*N x 3) into R x 3
/// pixel colours.
Var composite_rays(Var sigma, Var rgb, const Matrix& deltas, bool white_background);

/// Queries the field at every sample and composites.
Var render_rays(Tape& tape, const SceneGraph& graph, const SampleBatch& batch, bool white_background);

Vec3 render_pixel(const FactorizedModel& model, std::string_view scene_id, const Ray& ray, std::size_t n, Prng* prng);

/// Rays through pixel centres in row-major order, evaluated `chunk` rays at a
/// time. The result does not depend on `chunk`.
Image render_image(const FactorizedModel& model, std::string_view scene_id, const Camera& camera, std::size_t n,
                   Prng* prng, std::size_t chunk = 1024);

std::vector<Ray> camera_rays(const Camera& camera, double near, double far);

}  // namespace scarf
