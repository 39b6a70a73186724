#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "scarf/distillation.hpp"
#include "scarf/image.hpp"
#include "scarf/model.hpp"
#include "scarf/scenes.hpp"
#include "scarf/tape.hpp"

namespace scarf {

struct TrainConfig {
  double lr_matrices = 5e-4;
  double lr_matrices_end = 5e-5;
  double lr_generator = 1e-4;
  double lr_generator_end = 5e-5;
  double lr_beta = 8e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha = 3.0;
  double gamma = 0.2;
  std::size_t new_scene_rays = 4096;
  std::size_t distill_rays = 1024;
  std::size_t distill_points = 8192;
  std::size_t warmup_steps = 2000;
  std::size_t total_steps = 20000;
  std::size_t samples_per_ray = 64;
  std::uint64_t seed = 0;
  Aabb grid_aabb;
  GridSpec grid;

  // Ablation switches; all on is full USD.
  bool distill = true;
  bool field_distill = true;
  bool pixel_distill = true;
  bool learn_beta = true;
  bool surface_restriction = true;
  bool field_loss_squared = true;
  bool freeze_shared = false;
  bool freeze_old_scenes = false;

  std::size_t log_every = 100;
  std::size_t eval_samples = 64;

  static TrainConfig paper();
  /// Budget sized for a single CPU core.
  static TrainConfig desk();
  /// Throws ContractError naming the offending field.
  void validate() const;
};

/// lr0 (lr_end / lr0)^(step / total)
double exponential_lr(double lr0, double lr_end, std::size_t step, std::size_t total);

struct AdamState {
  Matrix m, v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update of `param` from its accumulated gradient;
/// a missing gradient counts as zero. Throws NumericalError naming `name`
/// when the gradient is not finite.
void adam_step(const std::string& name, Tensor& param, AdamState& state, double lr, double beta1, double beta2,
               double eps);

/// Adam over every trainable model tensor, keyed by parameter name. Learning
/// rates follow TrainConfig: generators, log-betas and everything else form
/// three groups.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainConfig& config) : config_(config) {}
  double learning_rate(const std::string& name, std::size_t step) const;
  void step(FactorizedModel& model, std::size_t step);
  const std::map<std::string, AdamState>& states() const { return states_; }

 private:
  TrainConfig config_;
  std::map<std::string, AdamState> states_;
};

/// mean over rays of the squared L2 colour error.
Var loss_new_scene(Var predicted, const Matrix& target);

/// sum of the per-scene distillation terms plus gamma * new-scene loss.
/// Invalid entries in `distill_terms` are skipped.
Var total_loss(Var new_scene, std::span<const Var> distill_terms, double gamma);

struct EvalView {
  Camera camera;
  Image image;
};
/// Held-out views per scene id, used only for reporting.
using EvalSet = std::map<std::string, std::vector<EvalView>>;
EvalSet eval_views(const SceneDataset& data, const std::string& scene_id);

struct SceneMetrics {
  std::string id;
  bool evaluated = false;
  bool has_before = false;
  double psnr_before = 0.0;
  double psnr_after = 0.0;
  double ssim_before = 0.0;
  double ssim_after = 0.0;
  /// Student against the stage's teacher on the first stored view; earlier
  /// scenes only.
  bool has_teacher_psnr = false;
  double teacher_psnr = 0.0;
};

struct LossPoint {
  std::size_t step = 0;
  double total = 0.0;
  double new_scene = 0.0;
  double distill = 0.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
};

struct StageReport {
  std::size_t stage_index = 0;
  std::string scene_id;
  std::vector<SceneMetrics> scenes;  // training order
  std::vector<LossPoint> curve;
  double wall_seconds = 0.0;
  std::size_t parameters_before = 0;
  std::size_t parameters_after = 0;
  std::size_t surface_cells = 0;

  const SceneMetrics& metrics(const std::string& id) const;
  /// Pretty JSON; wall time is the only field that varies between
  /// identical runs.
  std::string to_json() const;
  std::string table() const;
};

using ProgressFn = std::function<void(const LossPoint&)>;

/// One continual-learning stage: snapshot the teacher, register the scene,
/// extract occupancy grids of earlier scenes from the teacher, warm up on the
/// new scene alone, then optimize the full objective. Only `data`'s training
/// images are read; earlier scenes contribute through the teacher and their
/// stored frusta. The model ends rounded to storage precision.
StageReport train_stage(FactorizedModel& model, const SceneDataset& data, const std::string& scene_id,
                        const TrainConfig& config, const EvalSet* eval = nullptr, const ProgressFn& progress = {});

}  // namespace scarf
