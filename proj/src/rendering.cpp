#include "scarf/rendering.hpp"

#include <cmath>

#include "scarf/errors.hpp"

namespace scarf {

std::vector<double> stratified_sample(const Ray& ray, std::size_t n, Prng* prng) {
  if (n == 0) throw ContractError("stratified_sample needs at least one sample");
  std::vector<double> t(n);
  const double span = ray.far - ray.near;
  for (std::size_t k = 0; k < n; ++k) {
    const double lo = ray.near + span * static_cast<double>(k) / static_cast<double>(n);
    const double hi = ray.near + span * static_cast<double>(k + 1) / static_cast<double>(n);
    const double u = prng ? prng->uniform() : 0.5;
    t[k] = lo + u * (hi - lo);
  }
  return t;
}

std::vector<double> sample_deltas(std::span<const double> t, double far) {
  std::vector<double> d(t.size());
  for (std::size_t i = 0; i + 1 < t.size(); ++i) d[i] = t[i + 1] - t[i];
  if (!t.empty()) d.back() = far - t.back();
  return d;
}

CompositeResult composite(std::span<const double> sigma, std::span<const double> rgb, std::span<const double> t,
                          std::span<const double> delta, bool white_background) {
  const std::size_t n = sigma.size();
  if (rgb.size() != 3 * n || t.size() != n || delta.size() != n)
    throw DimensionError("composite: inconsistent sample batch lengths");
  CompositeResult r;
  r.weights.resize(n);
  r.transmittance.resize(n + 1);
  double optical = 0.0;
  double cr = 0.0, cg = 0.0, cb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = sigma[i] * delta[i];
    const double T = std::exp(-optical);
    const double w = T * -std::expm1(-a);
    r.transmittance[i] = T;
    r.weights[i] = w;
    cr += w * rgb[3 * i];
    cg += w * rgb[3 * i + 1];
    cb += w * rgb[3 * i + 2];
    r.depth += w * t[i];
    optical += a;
  }
  const double t_end = std::exp(-optical);
  r.transmittance[n] = t_end;
  if (white_background) {
    cr += t_end;
    cg += t_end;
    cb += t_end;
  }
  r.color = {cr, cg, cb};
  return r;
}

SampleBatch make_sample_batch(std::span<const Ray> rays, std::size_t n, Prng* prng, std::uint64_t stream_offset) {
  SampleBatch b;
  b.ray_count = rays.size();
  b.samples_per_ray = n;
  b.depths = Matrix(rays.size(), n);
  b.deltas = Matrix(rays.size(), n);
  b.positions = Matrix(rays.size() * n, 3);
  b.directions = Matrix(rays.size() * n, 3);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const Ray& ray = rays[r];
    validate_ray(ray);
    std::vector<double> t;
    if (prng) {
      Prng local = prng->split(stream_offset + r);
      t = stratified_sample(ray, n, &local);
    } else {
      t = stratified_sample(ray, n, nullptr);
    }
    const std::vector<double> d = sample_deltas(t, ray.far);
    for (std::size_t i = 0; i < n; ++i) {
      b.depths(r, i) = t[i];
      b.deltas(r, i) = d[i];
      const Vec3 p = ray.at(t[i]);
      const std::size_t row = r * n + i;
      b.positions(row, 0) = p.x;
      b.positions(row, 1) = p.y;
      b.positions(row, 2) = p.z;
      b.directions(row, 0) = ray.direction.x;
      b.directions(row, 1) = ray.direction.y;
      b.directions(row, 2) = ray.direction.z;
    }
  }
  return b;
}

Var composite_rays(Var sigma, Var rgb, const Matrix& deltas, bool white_background) {
  if (sigma.tape() != rgb.tape()) throw ContractError("composite_rays: operands on different tapes");
  const std::size_t R = deltas.rows(), N = deltas.cols();
  const Matrix& s = sigma.value();
  const Matrix& c = rgb.value();
  if (s.rows() != R * N || s.cols() != 1 || c.rows() != R * N || c.cols() != 3)
    throw DimensionError("composite_rays: sigma " + shape_string(s) + " / rgb " + shape_string(c) +
                         " do not match deltas " + shape_string(deltas));

  Matrix out(R, 3);
  for (std::size_t r = 0; r < R; ++r) {
    double optical = 0.0;
    double acc[3] = {0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t row = r * N + i;
      const double a = s[row] * deltas(r, i);
      const double w = std::exp(-optical) * -std::expm1(-a);
      for (int ch = 0; ch < 3; ++ch) acc[ch] += w * c(row, ch);
      optical += a;
    }
    const double bg = white_background ? std::exp(-optical) : 0.0;
    for (int ch = 0; ch < 3; ++ch) out(r, ch) = acc[ch] + bg;
  }

  const Var in[] = {sigma, rgb};
  return sigma.tape()->record(in, std::move(out), [deltas, white_background, R, N](const BackwardContext& ctx) {
    const Matrix& s = *ctx.inputs[0];
    const Matrix& c = *ctx.inputs[1];
    Matrix* gs = ctx.input_grads[0];
    Matrix* gc = ctx.input_grads[1];
    std::vector<double> T(N + 1), w(N);
    for (std::size_t r = 0; r < R; ++r) {
      double optical = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double a = s[r * N + i] * deltas(r, i);
        T[i] = std::exp(-optical);
        w[i] = T[i] * -std::expm1(-a);
        optical += a;
      }
      T[N] = std::exp(-optical);
      const double g[3] = {ctx.output_grad(r, 0), ctx.output_grad(r, 1), ctx.output_grad(r, 2)};
      if (gc)
        for (std::size_t i = 0; i < N; ++i)
          for (int ch = 0; ch < 3; ++ch) (*gc)(r * N + i, ch) += g[ch] * w[i];
      if (gs) {
        // dC/da_i = T_{i+1} c_i - sum_{j>i} w_j c_j - bg T_{N+1}
        const double bg = white_background ? T[N] : 0.0;
        double suffix = 0.0;  // g . sum_{j>i} w_j c_j
        for (std::size_t i = N; i-- > 0;) {
          const std::size_t row = r * N + i;
          const double gci = g[0] * c(row, 0) + g[1] * c(row, 1) + g[2] * c(row, 2);
          const double da = T[i + 1] * gci - suffix - bg * (g[0] + g[1] + g[2]);
          (*gs)[row] += deltas(r, i) * da;
          suffix += w[i] * gci;
        }
      }
    }
  });
}

Var render_rays(Tape& tape, const SceneGraph& graph, const SampleBatch& batch, bool white_background) {
  FieldVars f = query_field(tape, graph, batch.positions, batch.directions);
  return composite_rays(f.sigma, f.rgb, batch.deltas, white_background);
}

Vec3 render_pixel(const FactorizedModel& model, std::string_view scene_id, const Ray& ray, std::size_t n,
                  Prng* prng) {
  const SceneRecord& rec = model.scene(scene_id);
  Tape tape(false);
  SceneGraph g = bind_scene(tape, model, scene_id);
  const Ray rays[] = {ray};
  SampleBatch b = make_sample_batch(rays, n, prng);
  const Matrix& c = render_rays(tape, g, b, rec.frusta.white_background).value();
  return {c[0], c[1], c[2]};
}

std::vector<Ray> camera_rays(const Camera& camera, double near, double far) {
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(camera.width) * camera.height);
  for (std::uint32_t y = 0; y < camera.height; ++y)
    for (std::uint32_t x = 0; x < camera.width; ++x) rays.push_back(camera.pixel_ray(x, y, near, far));
  return rays;
}

Image render_image(const FactorizedModel& model, std::string_view scene_id, const Camera& camera, std::size_t n,
                   Prng* prng, std::size_t chunk) {
  if (chunk == 0) throw ContractError("render_image chunk must be positive");
  const SceneRecord& rec = model.scene(scene_id);
  const std::vector<Ray> rays = camera_rays(camera, rec.frusta.near, rec.frusta.far);
  Image img(camera.width, camera.height);
  Tape weights_tape(false);
  const SceneGraph g = bind_scene(weights_tape, model, scene_id);
  for (std::size_t start = 0; start < rays.size(); start += chunk) {
    const std::size_t count = std::min(chunk, rays.size() - start);
    const SampleBatch b = make_sample_batch(std::span(rays).subspan(start, count), n, prng, start);
    // Per-chunk tape keeps intermediates short-lived.
    Tape tape(false);
    const SceneGraph local = detach_onto(tape, g);
    const Matrix& c = render_rays(tape, local, b, rec.frusta.white_background).value();
    for (std::size_t i = 0; i < count; ++i) img.set_pixel(start + i, {c(i, 0), c(i, 1), c(i, 2)});
  }
  return img;
}

}  // namespace scarf
