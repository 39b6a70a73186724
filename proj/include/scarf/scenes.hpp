#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "scarf/camera.hpp"
#include "scarf/image.hpp"
#include "scarf/model.hpp"
#include "scarf/prng.hpp"

namespace scarf {

struct Primitive {
  enum class Kind { sphere, box, blob };
  Kind kind = Kind::sphere;
  Vec3 center;
  /// Sphere: radius in x. Box: half extents. Blob: standard deviation in x.
  Vec3 extent{1, 1, 1};
  double density = 10.0;  // inside value, or peak value for a blob
  Vec3 color{0.5, 0.5, 0.5};
  /// Colour shift per unit height, giving the scenes some texture.
  Vec3 color_gradient;

  double density_at(const Vec3& x) const;
  Vec3 color_at(const Vec3& x) const;
};

/// Closed-form radiance field. Colour is the density-weighted mix of the
/// primitives covering x and does not depend on direction.
struct AnalyticField {
  std::vector<Primitive> primitives;

  double density(const Vec3& x) const;
  Vec3 color(const Vec3& x, const Vec3& d) const;
};

AnalyticField builtin_field(const std::string& name);
std::vector<std::string> builtin_names();

/// Midpoint-quadrature rendering of the analytic field.
Image oracle_render(const AnalyticField& field, const Camera& camera, std::size_t n, double near, double far,
                    bool white_background);

struct View {
  Camera camera;
  Image image;
};

/// Posed images of one scene. Training pixels are read through
/// train_image(), which counts accesses so tests can prove a stage never
/// touches earlier scenes' data.
class SceneDataset {
 public:
  std::string name;
  std::string source;
  double near = 2.0;
  double far = 6.0;
  bool white_background = true;

  void add_train(View v) { train_.push_back(std::move(v)); }
  void add_test(View v) { test_.push_back(std::move(v)); }

  std::size_t train_count() const { return train_.size(); }
  std::size_t test_count() const { return test_.size(); }
  const Camera& train_camera(std::size_t i) const { return train_.at(i).camera; }
  const Camera& test_camera(std::size_t i) const { return test_.at(i).camera; }
  const Image& train_image(std::size_t i) const;
  const Image& test_image(std::size_t i) const;
  std::size_t image_reads() const { return reads_; }

  /// Poses and intrinsics of the training views.
  SceneFrusta frusta() const;

  bool operator==(const SceneDataset& o) const;

 private:
  std::vector<View> train_;
  std::vector<View> test_;
  mutable std::size_t reads_ = 0;
};

struct DatasetOptions {
  std::size_t train_views = 8;
  std::size_t test_views = 3;
  std::uint32_t image_size = 32;
  double radius = 4.0;
  double fov_x = 0.7;
  std::size_t oracle_samples = 256;
};

/// Cameras on a sphere around the origin; training views follow a jittered
/// Fibonacci lattice and test views sit between them.
SceneDataset make_dataset(const AnalyticField& field, const DatasetOptions& options, Prng& prng,
                          bool white_background = true);

/// "builtin:<name>" builds a synthetic scene, anything else is a directory
/// in the transforms_{train,test}.json convention.
SceneDataset load_dataset(const std::string& spec, const DatasetOptions& options, std::uint64_t seed);

SceneDataset load_external(const std::filesystem::path& dir);
void export_dataset(const SceneDataset& data, const std::filesystem::path& dir);

}  // namespace scarf
