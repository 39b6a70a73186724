#include "scarf/distillation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>

#include "scarf/errors.hpp"

namespace scarf {

std::size_t OccupancyGrid::occupied_count() const {
  return static_cast<std::size_t>(std::count(occupied.begin(), occupied.end(), std::uint8_t{1}));
}

Aabb OccupancyGrid::cell_bounds(std::size_t index) const {
  const std::size_t iz = index % resolution, iy = (index / resolution) % resolution,
                    ix = index / (resolution * resolution);
  const double n = static_cast<double>(resolution);
  auto lerp = [&](double lo, double hi, std::size_t i) { return lo + (hi - lo) * static_cast<double>(i) / n; };
  return {{lerp(aabb.lo.x, aabb.hi.x, ix), lerp(aabb.lo.y, aabb.hi.y, iy), lerp(aabb.lo.z, aabb.hi.z, iz)},
          {lerp(aabb.lo.x, aabb.hi.x, ix + 1), lerp(aabb.lo.y, aabb.hi.y, iy + 1),
           lerp(aabb.lo.z, aabb.hi.z, iz + 1)}};
}

std::size_t OccupancyGrid::locate(const Vec3& p) const {
  std::size_t idx[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - aabb.lo[a]) / (aabb.hi[a] - aabb.lo[a]);
    if (!(u >= 0.0 && u <= 1.0)) return cell_count();
    idx[a] = std::min(resolution - 1, static_cast<std::size_t>(u * static_cast<double>(resolution)));
  }
  return cell_index(idx[0], idx[1], idx[2]);
}

namespace {

constexpr char kGridMagic[8] = {'S', 'C', 'R', 'F', 'O', 'C', 'C', '1'};

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated occupancy grid");
  return v;
}

}  // namespace

void OccupancyGrid::write(std::ostream& out) const {
  out.write(kGridMagic, 8);
  for (double v : {aabb.lo.x, aabb.lo.y, aabb.lo.z, aabb.hi.x, aabb.hi.y, aabb.hi.z, tau}) put<double>(out, v);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(resolution));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(subgrid));
  std::vector<std::uint8_t> bits((occupied.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < occupied.size(); ++i)
    if (occupied[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
}

OccupancyGrid OccupancyGrid::read(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kGridMagic, 8) != 0) throw DataError("not an occupancy grid");
  OccupancyGrid g;
  double v[7];
  for (double& x : v) x = get<double>(in);
  g.aabb = {{v[0], v[1], v[2]}, {v[3], v[4], v[5]}};
  g.tau = v[6];
  g.resolution = get<std::uint32_t>(in);
  g.subgrid = get<std::uint32_t>(in);
  const std::size_t n = g.resolution * g.resolution * g.resolution;
  std::vector<std::uint8_t> bits((n + 7) / 8);
  in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (!in) throw DataError("truncated occupancy grid");
  g.occupied.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.occupied[i] = (bits[i / 8] >> (i % 8)) & 1u;
  return g;
}

Vec3 subgrid_point(const OccupancyGrid& grid, std::size_t ix, std::size_t iy, std::size_t iz, std::size_t sx,
                   std::size_t sy, std::size_t sz) {
  const double n = static_cast<double>(grid.resolution), s = static_cast<double>(grid.subgrid);
  auto coord = [&](double lo, double hi, std::size_t i, std::size_t k) {
    return lo + (hi - lo) * (static_cast<double>(i) + (static_cast<double>(k) + 0.5) / s) / n;
  };
  return {coord(grid.aabb.lo.x, grid.aabb.hi.x, ix, sx), coord(grid.aabb.lo.y, grid.aabb.hi.y, iy, sy),
          coord(grid.aabb.lo.z, grid.aabb.hi.z, iz, sz)};
}

OccupancyGrid extract_occupancy(const DensityFn& density, const Aabb& aabb, const GridSpec& spec) {
  for (int a = 0; a < 3; ++a)
    if (!(aabb.hi[a] > aabb.lo[a])) throw ContractError("occupancy box is degenerate along axis " + std::to_string(a));
  if (spec.resolution == 0 || spec.subgrid == 0) throw ContractError("occupancy resolution must be positive");
  OccupancyGrid g;
  g.aabb = aabb;
  g.resolution = spec.resolution;
  g.subgrid = spec.subgrid;
  g.tau = spec.tau;
  const std::size_t n = spec.resolution, s = spec.subgrid, per_cell = s * s * s;
  g.occupied.assign(n * n * n, 0);
  // One x-slab of cells per batch bounds memory at n^2 s^3 points.
  Matrix pts(n * n * per_cell, 3);
  for (std::size_t ix = 0; ix < n; ++ix) {
    std::size_t row = 0;
    for (std::size_t iy = 0; iy < n; ++iy)
      for (std::size_t iz = 0; iz < n; ++iz)
        for (std::size_t sx = 0; sx < s; ++sx)
          for (std::size_t sy = 0; sy < s; ++sy)
            for (std::size_t sz = 0; sz < s; ++sz, ++row) {
              const Vec3 p = subgrid_point(g, ix, iy, iz, sx, sy, sz);
              pts(row, 0) = p.x;
              pts(row, 1) = p.y;
              pts(row, 2) = p.z;
            }
    const std::vector<double> sigma = density(pts);
    if (sigma.size() != pts.rows()) throw DimensionError("density function returned the wrong number of values");
    for (std::size_t c = 0; c < n * n; ++c) {
      const auto first = sigma.begin() + static_cast<std::ptrdiff_t>(c * per_cell);
      if (std::any_of(first, first + static_cast<std::ptrdiff_t>(per_cell), [&](double v) { return v > spec.tau; }))
        g.occupied[ix * n * n + c] = 1;
    }
  }
  return g;
}

OccupancyGrid extract_occupancy(const FactorizedModel& model, std::string_view scene_id, const Aabb& aabb,
                                const GridSpec& spec) {
  Tape weights(false);
  const SceneGraph graph = bind_scene(weights, model, scene_id);
  auto density = [&](const Matrix& pts) {
    constexpr std::size_t chunk = 8192;
    std::vector<double> out;
    out.reserve(pts.rows());
    for (std::size_t start = 0; start < pts.rows(); start += chunk) {
      const std::size_t count = std::min(chunk, pts.rows() - start);
      Matrix part(count, 3, std::vector<double>(pts.data() + 3 * start, pts.data() + 3 * (start + count)));
      Tape tape(false);
      const Matrix& s = query_density(tape, detach_onto(tape, graph), part).value();
      out.insert(out.end(), s.values().begin(), s.values().end());
    }
    return out;
  };
  return extract_occupancy(density, aabb, spec);
}

Matrix sample_surface_points(const OccupancyGrid& grid, std::size_t count, Prng& prng) {
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < grid.occupied.size(); ++i)
    if (grid.occupied[i]) cells.push_back(i);
  if (cells.empty() || count == 0) return Matrix();
  Matrix pts(count, 3);
  for (std::size_t i = 0; i < count; ++i) {
    const Aabb b = grid.cell_bounds(cells[prng.below(cells.size())]);
    pts(i, 0) = prng.uniform(b.lo.x, b.hi.x);
    pts(i, 1) = prng.uniform(b.lo.y, b.hi.y);
    pts(i, 2) = prng.uniform(b.lo.z, b.hi.z);
  }
  return pts;
}

Matrix sample_box_points(const Aabb& aabb, std::size_t count, Prng& prng) {
  Matrix pts(count, 3);
  for (std::size_t i = 0; i < count; ++i) {
    pts(i, 0) = prng.uniform(aabb.lo.x, aabb.hi.x);
    pts(i, 1) = prng.uniform(aabb.lo.y, aabb.hi.y);
    pts(i, 2) = prng.uniform(aabb.lo.z, aabb.hi.z);
  }
  return pts;
}

Matrix sample_directions(std::size_t count, Prng& prng) {
  Matrix d(count, 3);
  for (std::size_t i = 0; i < count; ++i) {
    const double z = prng.uniform(-1.0, 1.0);
    const double phi = prng.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    d(i, 0) = r * std::cos(phi);
    d(i, 1) = r * std::sin(phi);
    d(i, 2) = z;
  }
  return d;
}

TeacherSnapshot::TeacherSnapshot(const FactorizedModel& model) : model_(model) {
  model_.set_all_trainable(false);
  model_.clear_grads();
  for (const SceneRecord& s : model_.scenes()) graphs_.emplace(s.id, bind_scene(tape_, model_, s.id));
}

const SceneGraph& TeacherSnapshot::graph(std::string_view id) const {
  const auto it = graphs_.find(id);
  if (it == graphs_.end()) throw ContractError("teacher has no scene '" + std::string(id) + "'");
  return it->second;
}

std::pair<Matrix, Matrix> TeacherSnapshot::query(std::string_view id, const Matrix& positions,
                                                 const Matrix& directions) const {
  Tape tape(false);
  const FieldVars f = query_field(tape, detach_onto(tape, graph(id)), positions, directions);
  return {f.sigma.value(), f.rgb.value()};
}

Matrix TeacherSnapshot::render(std::string_view id, const SampleBatch& batch) const {
  Tape tape(false);
  return render_rays(tape, detach_onto(tape, graph(id)), batch, model_.scene(id).frusta.white_background).value();
}

namespace {

// sqrt(sum_j x_rj^2 + eps) per row, R x 1.
Var row_norms(Var x) {
  constexpr double eps = 1e-12;
  const Matrix& v = x.value();
  Matrix out(v.rows(), 1);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double s = eps;
    for (double e : v.row(r)) s += e * e;
    out[r] = std::sqrt(s);
  }
  const Var in[] = {x};
  return x.tape()->record(in, std::move(out), [](const BackwardContext& ctx) {
    if (!ctx.input_grads[0]) return;
    const Matrix& v = *ctx.inputs[0];
    Matrix& g = *ctx.input_grads[0];
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t j = 0; j < v.cols(); ++j) g(r, j) += ctx.output_grad[r] * v(r, j) / ctx.output[r];
  });
}

}  // namespace

Var loss_field_distill(Tape& tape, const FieldVars& student, const Matrix& teacher_sigma, const Matrix& teacher_rgb,
                       double alpha, bool squared) {
  const std::size_t m = student.sigma.rows();
  if (m == 0) throw ContractError("field distillation needs at least one point");
  Var dc = sub(student.rgb, tape.constant(teacher_rgb));
  Var ds = sub(student.sigma, tape.constant(teacher_sigma));
  Var color_term = squared ? sum(square(dc)) : sum(row_norms(dc));
  Var sigma_term = squared ? sum(square(ds)) : sum(row_norms(ds));
  return scale(add(color_term, scale(sigma_term, alpha)), 1.0 / static_cast<double>(m));
}

Var loss_field_distill(Tape& tape, const FactorizedModel& student, const TeacherSnapshot& teacher,
                       std::string_view scene_id, const Matrix& points, const Matrix& directions, double alpha,
                       bool squared) {
  if (!teacher.has_scene(scene_id))
    throw ContractError("teacher has no scene '" + std::string(scene_id) + "' to distill");
  const auto [sigma, rgb] = teacher.query(scene_id, points, directions);
  const SceneGraph g = bind_scene(tape, student, scene_id);
  return loss_field_distill(tape, query_field(tape, g, points, directions), sigma, rgb, alpha, squared);
}

Var loss_pixel_distill(Var student_rgb, const Matrix& teacher_rgb) {
  return mean(square(sub(student_rgb, student_rgb.tape()->constant(teacher_rgb))));
}

Var loss_pixel_distill(Tape& tape, const FactorizedModel& student, const TeacherSnapshot& teacher,
                       std::string_view scene_id, const SampleBatch& batch) {
  if (!teacher.has_scene(scene_id))
    throw ContractError("teacher has no scene '" + std::string(scene_id) + "' to distill");
  const Matrix target = teacher.render(scene_id, batch);
  const SceneGraph g = bind_scene(tape, student, scene_id);
  return loss_pixel_distill(render_rays(tape, g, batch, student.scene(scene_id).frusta.white_background), target);
}

std::vector<Ray> sample_frusta_rays(const SceneFrusta& frusta, std::size_t count, Prng& prng) {
  if (frusta.views.empty()) throw ContractError("scene has no stored views to draw distillation rays from");
  std::vector<Ray> rays;
  rays.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Camera& cam = frusta.views[prng.below(frusta.views.size())];
    const auto px = static_cast<std::uint32_t>(prng.below(cam.width));
    const auto py = static_cast<std::uint32_t>(prng.below(cam.height));
    rays.push_back(cam.pixel_ray(px, py, frusta.near, frusta.far));
  }
  return rays;
}

Var uncertain_combine(Var l_field, Var l_pixel, Var log_beta1, Var log_beta2) {
  Var total;
  auto accumulate = [&](Var term, Var log_beta) {
    if (!term.valid()) return;
    Var part = add(mul(exp(log_beta), term), log_beta);
    total = total.valid() ? add(total, part) : part;
  };
  accumulate(l_field, log_beta1);
  accumulate(l_pixel, log_beta2);
  return total;
}

}  // namespace scarf
