#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "scarf/model.hpp"
#include "scarf/prng.hpp"
#include "scarf/rendering.hpp"
#include "scarf/tape.hpp"

namespace scarf {

struct Aabb {
  Vec3 lo{-1.5, -1.5, -1.5};
  Vec3 hi{1.5, 1.5, 1.5};
  bool operator==(const Aabb&) const = default;
};

struct GridSpec {
  std::size_t resolution = 50;
  std::size_t subgrid = 5;
  double tau = 3.0;
};

/// Boolean voxelization of where a scene's density exceeds tau. Cells are
/// indexed x-major: (ix * res + iy) * res + iz.
struct OccupancyGrid {
  Aabb aabb;
  std::size_t resolution = 0;
  std::size_t subgrid = 0;
  double tau = 0.0;
  std::vector<std::uint8_t> occupied;

  std::size_t cell_count() const { return occupied.size(); }
  std::size_t occupied_count() const;
  bool empty() const { return occupied_count() == 0; }
  std::size_t cell_index(std::size_t ix, std::size_t iy, std::size_t iz) const {
    return (ix * resolution + iy) * resolution + iz;
  }
  Aabb cell_bounds(std::size_t index) const;
  /// Index of the cell containing p, or cell_count() when p is outside.
  std::size_t locate(const Vec3& p) const;

  /// Header (magic, aabb, resolution, subgrid, tau) and one bit per cell.
  void write(std::ostream& out) const;
  static OccupancyGrid read(std::istream& in);
  bool operator==(const OccupancyGrid&) const = default;
};

/// The lattice point s of a cell sits at the centre of subcell s.
Vec3 subgrid_point(const OccupancyGrid& grid, std::size_t ix, std::size_t iy, std::size_t iz, std::size_t sx,
                   std::size_t sy, std::size_t sz);

/// Densities for an M x 3 batch of points.
using DensityFn = std::function<std::vector<double>(const Matrix& points)>;

/// Marks a cell iff some lattice point in it has density > tau.
OccupancyGrid extract_occupancy(const DensityFn& density, const Aabb& aabb, const GridSpec& spec);
OccupancyGrid extract_occupancy(const FactorizedModel& model, std::string_view scene_id, const Aabb& aabb,
                                const GridSpec& spec);

/// Uniform over occupied cells, then uniform within the cell. Returns an
/// empty matrix when the grid has no occupied cell, meaning the field term
/// is skipped for that scene.
Matrix sample_surface_points(const OccupancyGrid& grid, std::size_t count, Prng& prng);
/// Uniform in the box; used when the surface restriction is switched off.
Matrix sample_box_points(const Aabb& aabb, std::size_t count, Prng& prng);
/// count x 3 unit vectors, uniform on the sphere.
Matrix sample_directions(std::size_t count, Prng& prng);

/// Frozen deep copy of the model from the end of the previous stage.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const FactorizedModel& model);
  TeacherSnapshot(const TeacherSnapshot&) = delete;
  TeacherSnapshot& operator=(const TeacherSnapshot&) = delete;

  const FactorizedModel& model() const { return model_; }
  bool has_scene(std::string_view id) const { return model_.has_scene(id); }

  /// Teacher field at the given points; same arithmetic as the student path.
  std::pair<Matrix, Matrix> query(std::string_view id, const Matrix& positions, const Matrix& directions) const;
  /// Teacher colours for a sample batch, R x 3.
  Matrix render(std::string_view id, const SampleBatch& batch) const;

 private:
  const SceneGraph& graph(std::string_view id) const;

  FactorizedModel model_;
  Tape tape_{false};
  std::map<std::string, SceneGraph, std::less<>> graphs_;
};

/// mean_i ||c_s - c_t||^2 + alpha (sigma_s - sigma_t)^2, or with plain
/// norms when `squared` is false. Teacher values enter as constants.
Var loss_field_distill(Tape& tape, const FieldVars& student, const Matrix& teacher_sigma, const Matrix& teacher_rgb,
                       double alpha, bool squared = true);
Var loss_field_distill(Tape& tape, const FactorizedModel& student, const TeacherSnapshot& teacher,
                       std::string_view scene_id, const Matrix& points, const Matrix& directions, double alpha,
                       bool squared = true);

/// Mean squared error over rays and channels against teacher pixels.
Var loss_pixel_distill(Var student_rgb, const Matrix& teacher_rgb);
Var loss_pixel_distill(Tape& tape, const FactorizedModel& student, const TeacherSnapshot& teacher,
                       std::string_view scene_id, const SampleBatch& batch);

/// Random pixel rays from a scene's stored training frusta.
std::vector<Ray> sample_frusta_rays(const SceneFrusta& frusta, std::size_t count, Prng& prng);

/// beta1 L_field + beta2 L_pixel + log beta1 + log beta2 with beta = exp(log_beta).
/// An invalid term drops together with its log beta.
Var uncertain_combine(Var l_field, Var l_pixel, Var log_beta1, Var log_beta2);

}  // namespace scarf
