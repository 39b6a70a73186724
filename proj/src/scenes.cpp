#include "scarf/scenes.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "scarf/errors.hpp"
#include "scarf/rendering.hpp"

namespace scarf {

namespace {

using nlohmann::json;

Vec3 clamp_color(const Vec3& c) {
  return {std::clamp(c.x, 0.0, 1.0), std::clamp(c.y, 0.0, 1.0), std::clamp(c.z, 0.0, 1.0)};
}

}  // namespace

double Primitive::density_at(const Vec3& x) const {
  const Vec3 r = x - center;
  switch (kind) {
    case Kind::sphere:
      return r.dot(r) < extent.x * extent.x ? density : 0.0;
    case Kind::box:
      return std::abs(r.x) < extent.x && std::abs(r.y) < extent.y && std::abs(r.z) < extent.z ? density : 0.0;
    case Kind::blob:
      return density * std::exp(-0.5 * r.dot(r) / (extent.x * extent.x));
  }
  return 0.0;
}

Vec3 Primitive::color_at(const Vec3& x) const {
  return clamp_color(color + color_gradient * (x.y - center.y));
}

double AnalyticField::density(const Vec3& x) const {
  double s = 0.0;
  for (const Primitive& p : primitives) s += p.density_at(x);
  return s;
}

Vec3 AnalyticField::color(const Vec3& x, const Vec3&) const {
  double total = 0.0;
  Vec3 acc;
  for (const Primitive& p : primitives) {
    const double s = p.density_at(x);
    if (s <= 0.0) continue;
    total += s;
    acc = acc + p.color_at(x) * s;
  }
  if (total <= 0.0) return {0.5, 0.5, 0.5};
  return acc * (1.0 / total);
}

AnalyticField builtin_field(const std::string& name) {
  using K = Primitive::Kind;
  AnalyticField f;
  if (name == "sphere-red") {
    f.primitives.push_back({K::sphere, {0, 0, 0}, {1.0, 1.0, 1.0}, 12.0, {0.75, 0.2, 0.15}, {0.12, 0.05, 0.04}});
  } else if (name == "boxes-rgb") {
    f.primitives.push_back({K::box, {-0.6, -0.3, 0.1}, {0.35, 0.5, 0.35}, 12.0, {0.85, 0.15, 0.15}, {}});
    f.primitives.push_back({K::box, {0.5, 0.2, -0.3}, {0.3, 0.3, 0.3}, 12.0, {0.15, 0.8, 0.2}, {}});
    f.primitives.push_back({K::box, {0.1, -0.4, 0.6}, {0.45, 0.15, 0.25}, 12.0, {0.15, 0.25, 0.85}, {}});
  } else {
    throw LookupError("unknown builtin scene '" + name + "'");
  }
  return f;
}

std::vector<std::string> builtin_names() { return {"sphere-red", "boxes-rgb"}; }

Image oracle_render(const AnalyticField& field, const Camera& camera, std::size_t n, double near, double far,
                    bool white_background) {
  if (n == 0) throw ContractError("oracle_render needs at least one sample");
  Image img(camera.width, camera.height);
  std::vector<double> sigma(n), rgb(3 * n);
  for (std::uint32_t y = 0; y < camera.height; ++y)
    for (std::uint32_t x = 0; x < camera.width; ++x) {
      const Ray ray = camera.pixel_ray(x, y, near, far);
      const std::vector<double> t = stratified_sample(ray, n, nullptr);
      const std::vector<double> d = sample_deltas(t, far);
      for (std::size_t i = 0; i < n; ++i) {
        const Vec3 p = ray.at(t[i]);
        sigma[i] = field.density(p);
        const Vec3 c = field.color(p, ray.direction);
        rgb[3 * i] = c.x;
        rgb[3 * i + 1] = c.y;
        rgb[3 * i + 2] = c.z;
      }
      img.set_pixel(static_cast<std::size_t>(y) * camera.width + x,
                    composite(sigma, rgb, t, d, white_background).color);
    }
  return img;
}

const Image& SceneDataset::train_image(std::size_t i) const {
  ++reads_;
  return train_.at(i).image;
}

const Image& SceneDataset::test_image(std::size_t i) const { return test_.at(i).image; }

SceneFrusta SceneDataset::frusta() const {
  SceneFrusta f;
  for (const View& v : train_) f.views.push_back(v.camera);
  f.near = near;
  f.far = far;
  f.white_background = white_background;
  return f;
}

bool SceneDataset::operator==(const SceneDataset& o) const {
  auto same = [](const std::vector<View>& a, const std::vector<View>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a[i].camera == b[i].camera) || !(a[i].image == b[i].image)) return false;
    return true;
  };
  return near == o.near && far == o.far && white_background == o.white_background && same(train_, o.train_) &&
         same(test_, o.test_);
}

namespace {

Vec3 fibonacci_direction(std::size_t i, std::size_t n, double phase) {
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  // Keep away from the poles, where a y-up look_at degenerates.
  const double y = 0.9 * (1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  const double r = std::sqrt(1.0 - y * y);
  const double phi = golden * static_cast<double>(i) + phase;
  return {r * std::cos(phi), y, r * std::sin(phi)};
}

}  // namespace

SceneDataset make_dataset(const AnalyticField& field, const DatasetOptions& options, Prng& prng,
                          bool white_background) {
  if (options.train_views < 2) throw ContractError("make_dataset needs at least two training views");
  if (options.test_views < 1) throw ContractError("make_dataset needs at least one test view");
  SceneDataset ds;
  ds.white_background = white_background;
  ds.near = options.radius - 2.0;
  ds.far = options.radius + 2.0;
  const double phase = prng.uniform(0.0, 2.0 * std::numbers::pi);
  auto make_view = [&](const Vec3& dir) {
    const Camera cam = Camera::look_at(dir * options.radius, {0, 0, 0}, {0, 1, 0}, options.fov_x,
                                       options.image_size, options.image_size);
    return View{cam, oracle_render(field, cam, options.oracle_samples, ds.near, ds.far, white_background)};
  };
  for (std::size_t i = 0; i < options.train_views; ++i)
    ds.add_train(make_view(fibonacci_direction(i, options.train_views, phase)));
  // Test views interleave with the training lattice.
  const double test_phase = phase + std::numbers::pi / static_cast<double>(options.train_views);
  for (std::size_t i = 0; i < options.test_views; ++i)
    ds.add_test(make_view(fibonacci_direction(2 * i + 1, 2 * options.test_views + 1, test_phase)));
  return ds;
}

SceneDataset load_dataset(const std::string& spec, const DatasetOptions& options, std::uint64_t seed) {
  constexpr std::string_view prefix = "builtin:";
  if (spec.starts_with(prefix)) {
    const std::string name = spec.substr(prefix.size());
    Prng prng(seed);
    SceneDataset ds = make_dataset(builtin_field(name), options, prng);
    ds.name = name;
    ds.source = spec;
    return ds;
  }
  SceneDataset ds = load_external(spec);
  ds.source = spec;
  return ds;
}

namespace {

json camera_to_matrix(const Camera& c) {
  const auto& r = c.rotation;
  return json::array({json::array({r[0], r[1], r[2], c.position.x}), json::array({r[3], r[4], r[5], c.position.y}),
                      json::array({r[6], r[7], r[8], c.position.z}), json::array({0.0, 0.0, 0.0, 1.0})});
}

Camera matrix_to_camera(const json& m, std::size_t frame, const std::string& manifest) {
  auto fail = [&](const std::string& what) {
    return DataError(manifest + ": frame " + std::to_string(frame) + ": " + what);
  };
  if (!m.is_array() || m.size() < 3) throw fail("transform_matrix must be a 4x4 array");
  Camera c;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!m[i].is_array() || m[i].size() != 4) throw fail("transform_matrix row " + std::to_string(i) + " is malformed");
    for (std::size_t j = 0; j < 4; ++j)
      if (!m[i][j].is_number()) throw fail("transform_matrix has a non-numeric entry");
    for (std::size_t j = 0; j < 3; ++j) c.rotation[3 * i + j] = m[i][j].get<double>();
  }
  c.position = {m[0][3].get<double>(), m[1][3].get<double>(), m[2][3].get<double>()};
  const double err = orthonormality_error(c.rotation);
  if (!(err <= 1e-6)) throw fail("rotation is not orthonormal (error " + std::to_string(err) + ")");
  return c;
}

std::filesystem::path image_path(const std::filesystem::path& dir, const std::string& file_path) {
  std::filesystem::path p = dir / file_path;
  if (!p.has_extension()) p += ".png";
  return p.lexically_normal();
}

void load_split(const std::filesystem::path& dir, const std::string& split, SceneDataset& ds, bool train,
                bool& first, double& fov_x) {
  const std::filesystem::path manifest = dir / ("transforms_" + split + ".json");
  std::ifstream in(manifest);
  if (!in) throw DataError("missing pose manifest '" + manifest.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed manifest '" + manifest.string() + "': " + e.what());
  }
  if (!j.contains("camera_angle_x") || !j["camera_angle_x"].is_number())
    throw DataError(manifest.string() + ": camera_angle_x missing");
  if (!j.contains("frames") || !j["frames"].is_array()) throw DataError(manifest.string() + ": frames missing");
  const double angle = j["camera_angle_x"].get<double>();
  if (!(angle > 0.0 && angle < std::numbers::pi)) throw DataError(manifest.string() + ": camera_angle_x out of range");
  if (first) {
    fov_x = angle;
    ds.near = j.value("near", 2.0);
    ds.far = j.value("far", 6.0);
    ds.white_background = j.value("white_background", true);
    ds.name = j.value("name", dir.filename().string());
    first = false;
  }
  std::size_t idx = 0;
  for (const json& frame : j["frames"]) {
    if (!frame.contains("file_path") || !frame.contains("transform_matrix"))
      throw DataError(manifest.string() + ": frame " + std::to_string(idx) + " lacks file_path or transform_matrix");
    Camera cam = matrix_to_camera(frame["transform_matrix"], idx, manifest.string());
    Image img = read_png(image_path(dir, frame["file_path"].get<std::string>()), ds.white_background);
    cam.width = img.width;
    cam.height = img.height;
    cam.focal = Camera::focal_from_fov(angle, img.width);
    cam.cx = 0.5 * img.width;
    cam.cy = 0.5 * img.height;
    if (train)
      ds.add_train({cam, std::move(img)});
    else
      ds.add_test({cam, std::move(img)});
    ++idx;
  }
}

}  // namespace

SceneDataset load_external(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory '" + dir.string() + "' not found");
  SceneDataset ds;
  bool first = true;
  double fov_x = 0.0;
  load_split(dir, "train", ds, true, first, fov_x);
  const std::string test_split = std::filesystem::exists(dir / "transforms_test.json") ? "test" : "val";
  load_split(dir, test_split, ds, false, first, fov_x);
  if (ds.train_count() == 0 || ds.test_count() == 0)
    throw DataError("dataset '" + dir.string() + "' needs at least one train and one test frame");
  return ds;
}

namespace {

double fov_from_camera(const Camera& c) { return 2.0 * std::atan(0.5 * c.width / c.focal); }

void export_split(const SceneDataset& ds, const std::filesystem::path& dir, const std::string& split, bool train) {
  std::filesystem::create_directories(dir / split);
  json j;
  const std::size_t count = train ? ds.train_count() : ds.test_count();
  const Camera& first = train ? ds.train_camera(0) : ds.test_camera(0);
  j["camera_angle_x"] = fov_from_camera(first);
  j["near"] = ds.near;
  j["far"] = ds.far;
  j["white_background"] = ds.white_background;
  j["name"] = ds.name;
  j["frames"] = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const Camera& cam = train ? ds.train_camera(i) : ds.test_camera(i);
    const std::string rel = "./" + split + "/r_" + std::to_string(i);
    write_png(dir / (split + "/r_" + std::to_string(i) + ".png"), train ? ds.train_image(i) : ds.test_image(i));
    j["frames"].push_back({{"file_path", rel}, {"transform_matrix", camera_to_matrix(cam)}});
  }
  std::ofstream out(dir / ("transforms_" + split + ".json"));
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing manifest in '" + dir.string() + "'");
}

}  // namespace

void export_dataset(const SceneDataset& data, const std::filesystem::path& dir) {
  if (data.train_count() == 0 || data.test_count() == 0) throw ContractError("cannot export an empty dataset");
  export_split(data, dir, "train", true);
  export_split(data, dir, "test", false);
}

}  // namespace scarf
