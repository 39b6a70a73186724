#include "scarf/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "scarf/errors.hpp"
#include "scarf/metrics.hpp"
#include "scarf/rendering.hpp"

namespace scarf {

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.lr_matrices = 2e-3;
  c.lr_generator = 1e-3;
  c.new_scene_rays = 64;
  c.distill_rays = 32;
  c.distill_points = 256;
  c.samples_per_ray = 32;
  c.total_steps = 8000;
  c.warmup_steps = 800;
  c.grid.resolution = 32;
  c.grid.subgrid = 3;
  return c;
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ContractError(std::string("train config: ") + name + " must be positive");
  };
  positive(lr_matrices, "lr_matrices");
  positive(lr_matrices_end, "lr_matrices_end");
  positive(lr_generator, "lr_generator");
  positive(lr_generator_end, "lr_generator_end");
  positive(lr_beta, "lr_beta");
  positive(adam_eps, "adam_eps");
  positive(static_cast<double>(new_scene_rays), "new_scene_rays");
  positive(static_cast<double>(distill_rays), "distill_rays");
  positive(static_cast<double>(distill_points), "distill_points");
  positive(static_cast<double>(total_steps), "total_steps");
  positive(static_cast<double>(samples_per_ray), "samples_per_ray");
  positive(static_cast<double>(grid.resolution), "grid_resolution");
  positive(static_cast<double>(grid.subgrid), "grid_subgrid");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ContractError("train config: adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ContractError("train config: adam_beta2 must lie in [0, 1)");
  if (!(alpha >= 0.0)) throw ContractError("train config: alpha must be nonnegative");
  if (!(gamma >= 0.0)) throw ContractError("train config: gamma must be nonnegative");
  if (warmup_steps >= total_steps) throw ContractError("train config: warmup_steps must be below total_steps");
}

double exponential_lr(double lr0, double lr_end, std::size_t step, std::size_t total) {
  if (total == 0) return lr0;
  return lr0 * std::pow(lr_end / lr0, static_cast<double>(step) / static_cast<double>(total));
}

void adam_step(const std::string& name, Tensor& param, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  Matrix& w = param.value();
  if (state.m.rows() != w.rows() || state.m.cols() != w.cols()) {
    state.m = Matrix(w.rows(), w.cols());
    state.v = Matrix(w.rows(), w.cols());
  }
  ++state.t;
  const bool has_grad = param.has_grad();
  const Matrix& g = param.grad();
  if (has_grad)
    for (double v : g.values())
      if (!std::isfinite(v)) throw NumericalError("non-finite gradient in parameter '" + name + "'");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = has_grad ? g[i] : 0.0;
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
    w[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + eps);
  }
}

double AdamOptimizer::learning_rate(const std::string& name, std::size_t step) const {
  if (name.starts_with("log_beta")) return config_.lr_beta;
  if (name.starts_with("generator."))
    return exponential_lr(config_.lr_generator, config_.lr_generator_end, step, config_.total_steps);
  return exponential_lr(config_.lr_matrices, config_.lr_matrices_end, step, config_.total_steps);
}

void AdamOptimizer::step(FactorizedModel& model, std::size_t step) {
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    if (!t.requires_grad()) return;
    adam_step(name, t, states_[name], learning_rate(name, step), config_.adam_beta1, config_.adam_beta2,
              config_.adam_eps);
  });
}

Var loss_new_scene(Var predicted, const Matrix& target) {
  const Var diff = sub(predicted, predicted.tape()->constant(target));
  return scale(sum(square(diff)), 1.0 / static_cast<double>(predicted.rows()));
}

Var total_loss(Var new_scene, std::span<const Var> distill_terms, double gamma) {
  Var total = scale(new_scene, gamma);
  for (const Var& t : distill_terms)
    if (t.valid()) total = add(total, t);
  return total;
}

EvalSet eval_views(const SceneDataset& data, const std::string& scene_id) {
  EvalSet set;
  auto& views = set[scene_id];
  for (std::size_t i = 0; i < data.test_count(); ++i) views.push_back({data.test_camera(i), data.test_image(i)});
  return set;
}

const SceneMetrics& StageReport::metrics(const std::string& id) const {
  for (const auto& m : scenes)
    if (m.id == id) return m;
  throw LookupError("report has no scene '" + id + "'");
}

namespace {

using nlohmann::json;

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string StageReport::to_json() const {
  json j;
  j["stage"] = stage_index;
  j["scene_id"] = scene_id;
  j["wall_seconds"] = wall_seconds;
  j["parameters_before"] = parameters_before;
  j["parameters_after"] = parameters_after;
  j["parameter_delta"] = static_cast<long long>(parameters_after) - static_cast<long long>(parameters_before);
  j["surface_cells"] = surface_cells;
  j["scenes"] = json::array();
  for (const auto& m : scenes) {
    json s{{"id", m.id}, {"evaluated", m.evaluated}};
    if (m.evaluated) {
      s["psnr_after"] = finite_or_null(m.psnr_after);
      s["ssim_after"] = m.ssim_after;
      if (m.has_before) {
        s["psnr_before"] = finite_or_null(m.psnr_before);
        s["ssim_before"] = m.ssim_before;
        s["psnr_delta"] = finite_or_null(m.psnr_after - m.psnr_before);
      }
    }
    if (m.has_teacher_psnr) s["psnr_vs_teacher"] = finite_or_null(m.teacher_psnr);
    j["scenes"].push_back(s);
  }
  j["curve"] = json::array();
  for (const auto& p : curve)
    j["curve"].push_back({{"step", p.step},
                          {"total", p.total},
                          {"new_scene", p.new_scene},
                          {"distill", p.distill},
                          {"beta1", p.beta1},
                          {"beta2", p.beta2}});
  return j.dump(2);
}

std::string StageReport::table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "stage %zu: %s (%.1f s, +%zu parameters)\n", stage_index, scene_id.c_str(),
                wall_seconds, parameters_after - parameters_before);
  out << line;
  std::snprintf(line, sizeof line, "%-20s %10s %10s %10s %8s\n", "scene", "before", "after", "delta", "ssim");
  out << line;
  for (const auto& m : scenes) {
    if (!m.evaluated) {
      std::snprintf(line, sizeof line, "%-20s %10s %10s %10s %8s\n", m.id.c_str(), "-", "-", "-", "-");
    } else if (m.has_before) {
      std::snprintf(line, sizeof line, "%-20s %10.2f %10.2f %+10.2f %8.4f\n", m.id.c_str(), m.psnr_before,
                    m.psnr_after, m.psnr_after - m.psnr_before, m.ssim_after);
    } else {
      std::snprintf(line, sizeof line, "%-20s %10s %10.2f %10s %8.4f\n", m.id.c_str(), "-", m.psnr_after, "-",
                    m.ssim_after);
    }
    out << line;
  }
  return out.str();
}

namespace {

struct Evaluation {
  double psnr = 0.0;
  double ssim = 0.0;
};

Evaluation evaluate(const FactorizedModel& model, const std::string& id, const std::vector<EvalView>& views,
                    std::size_t samples) {
  // Average MSE over views, then convert, so one perfect view cannot
  // dominate.
  double total_mse = 0.0, total_ssim = 0.0;
  for (const EvalView& v : views) {
    const Image img = render_image(model, id, v.camera, samples, nullptr);
    total_mse += mse(img, v.image);
    total_ssim += ssim(img, v.image);
  }
  const double m = total_mse / static_cast<double>(views.size());
  return {m == 0.0 ? kPsnrIdentical : -10.0 * std::log10(m), total_ssim / static_cast<double>(views.size())};
}

// Splits `total` over `parts`, remainders to the earliest.
std::size_t share(std::size_t total, std::size_t parts, std::size_t index) {
  return total / parts + (index < total % parts ? 1 : 0);
}

}  // namespace

StageReport train_stage(FactorizedModel& model, const SceneDataset& data, const std::string& scene_id,
                        const TrainConfig& config, const EvalSet* eval, const ProgressFn& progress) {
  config.validate();
  if (model.has_scene(scene_id)) throw ConflictError("scene '" + scene_id + "' has already been trained");
  if (data.train_count() == 0) throw DataError("dataset for '" + scene_id + "' has no training views");
  const auto started = std::chrono::steady_clock::now();

  StageReport report;
  report.stage_index = model.scenes().size();
  report.scene_id = scene_id;
  report.parameters_before = model.count_parameters().total();

  std::vector<std::string> old_ids;
  for (const auto& s : model.scenes()) old_ids.push_back(s.id);

  std::map<std::string, Evaluation> before;
  if (eval)
    for (const auto& id : old_ids)
      if (auto it = eval->find(id); it != eval->end() && !it->second.empty())
        before[id] = evaluate(model, id, it->second, config.eval_samples);

  const Prng root(config.seed);
  const TeacherSnapshot teacher(model);
  Prng scene_rng = root.split(1);
  model.add_scene(scene_id, data.frusta(), scene_rng, data.source);

  const bool distilling = config.distill && !old_ids.empty();
  std::vector<OccupancyGrid> grids(old_ids.size());
  if (distilling && config.field_distill && config.surface_restriction)
    for (std::size_t i = 0; i < old_ids.size(); ++i) {
      grids[i] = extract_occupancy(teacher.model(), old_ids[i], config.grid_aabb, config.grid);
      report.surface_cells += grids[i].occupied_count();
      if (grids[i].empty())
        std::fprintf(stderr, "warning: scene '%s' has no occupied cells; field distillation skipped\n",
                     old_ids[i].c_str());
    }

  // Every training pixel of the new scene, as (ray, colour).
  std::vector<Ray> pixel_rays;
  std::vector<double> pixel_colors;
  for (std::size_t v = 0; v < data.train_count(); ++v) {
    const Image& img = data.train_image(v);
    const std::vector<Ray> rays = camera_rays(data.train_camera(v), data.near, data.far);
    pixel_rays.insert(pixel_rays.end(), rays.begin(), rays.end());
    pixel_colors.insert(pixel_colors.end(), img.rgb.begin(), img.rgb.end());
  }

  model.set_all_trainable(true);
  if (config.freeze_shared) model.set_shared_trainable(false);
  if (config.freeze_old_scenes)
    for (const auto& id : old_ids) model.set_scene_trainable(id, false);
  model.set_uncertainty_trainable(config.learn_beta && distilling);
  model.clear_grads();

  AdamOptimizer optimizer(config);
  const std::size_t R = config.new_scene_rays;
  for (std::size_t step = 0; step < config.total_steps; ++step) {
    const Prng step_rng = root.split(1000 + step);
    Prng ray_rng = step_rng.split(0);
    const bool joint = distilling && step >= config.warmup_steps;

    Tape tape;
    std::vector<Ray> rays(R);
    Matrix target(R, 3);
    for (std::size_t i = 0; i < R; ++i) {
      const std::size_t k = ray_rng.below(pixel_rays.size());
      rays[i] = pixel_rays[k];
      for (int c = 0; c < 3; ++c) target(i, c) = pixel_colors[3 * k + c];
    }
    Prng sample_rng = step_rng.split(1);
    const SampleBatch batch = make_sample_batch(rays, config.samples_per_ray, &sample_rng);
    const SceneGraph graph = bind_scene(tape, model, scene_id);
    const Var l_new = loss_new_scene(render_rays(tape, graph, batch, data.white_background), target);

    std::vector<Var> distill_terms;
    if (joint) {
      const Var lb1 = tape.param(model.log_beta1());
      const Var lb2 = tape.param(model.log_beta2());
      for (std::size_t i = 0; i < old_ids.size(); ++i) {
        const std::string& id = old_ids[i];
        const SceneRecord& rec = model.scene(id);
        const SceneGraph g = bind_scene(tape, model, id);
        Prng rng = step_rng.split(100 + i);
        Var l_pixel, l_field;
        if (config.pixel_distill) {
          const std::vector<Ray> drays = sample_frusta_rays(rec.frusta, share(config.distill_rays, old_ids.size(), i),
                                                            rng);
          Prng drng = rng.split(1);
          const SampleBatch db = make_sample_batch(drays, config.samples_per_ray, &drng);
          l_pixel = loss_pixel_distill(render_rays(tape, g, db, rec.frusta.white_background), teacher.render(id, db));
        }
        if (config.field_distill) {
          const std::size_t n = share(config.distill_points, old_ids.size(), i);
          Prng prng = rng.split(2);
          const Matrix pts = config.surface_restriction ? sample_surface_points(grids[i], n, prng)
                                                        : sample_box_points(config.grid_aabb, n, prng);
          if (!pts.empty()) {
            const Matrix dirs = sample_directions(pts.rows(), prng);
            const auto [sigma, rgb] = teacher.query(id, pts, dirs);
            l_field = loss_field_distill(tape, query_field(tape, g, pts, dirs), sigma, rgb, config.alpha,
                                         config.field_loss_squared);
          }
        }
        const Var term = uncertain_combine(l_field, l_pixel, lb1, lb2);
        if (term.valid()) distill_terms.push_back(term);
      }
    }
    // The warm-up optimizes the new-scene loss alone; afterwards gamma
    // weighs it against distillation.
    const Var loss = step < config.warmup_steps ? l_new : total_loss(l_new, distill_terms, config.gamma);
    if (!std::isfinite(loss.item())) throw NumericalError("loss became non-finite at step " + std::to_string(step));
    tape.backward(loss);
    optimizer.step(model, step);
    model.clear_grads();

    if (step % config.log_every == 0 || step + 1 == config.total_steps) {
      LossPoint p;
      p.step = step;
      p.total = loss.item();
      p.new_scene = l_new.item();
      for (const Var& t : distill_terms) p.distill += t.item();
      p.beta1 = model.beta1();
      p.beta2 = model.beta2();
      report.curve.push_back(p);
      if (progress) progress(p);
    }
  }
  model.round_to_storage_precision();
  model.set_all_trainable(true);

  for (const auto& s : model.scenes()) {
    SceneMetrics m;
    m.id = s.id;
    if (eval)
      if (auto it = eval->find(s.id); it != eval->end() && !it->second.empty()) {
        const Evaluation after = evaluate(model, s.id, it->second, config.eval_samples);
        m.evaluated = true;
        m.psnr_after = after.psnr;
        m.ssim_after = after.ssim;
        if (auto b = before.find(s.id); b != before.end()) {
          m.has_before = true;
          m.psnr_before = b->second.psnr;
          m.ssim_before = b->second.ssim;
        }
      }
    if (teacher.has_scene(s.id) && !s.frusta.views.empty()) {
      const Camera& cam = s.frusta.views.front();
      m.has_teacher_psnr = true;
      m.teacher_psnr = psnr(render_image(model, s.id, cam, config.eval_samples, nullptr),
                            render_image(teacher.model(), s.id, cam, config.eval_samples, nullptr));
    }
    report.scenes.push_back(m);
  }
  report.parameters_after = model.count_parameters().total();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace scarf
