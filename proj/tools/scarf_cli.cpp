#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "scarf/errors.hpp"
#include "scarf/metrics.hpp"
#include "scarf/model_io.hpp"
#include "scarf/rendering.hpp"
#include "scarf/run_config.hpp"
#include "scarf/scenes.hpp"
#include "scarf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scarf;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value run configuration file");
    cmd->add_option("--set", sets, "override one config key, as key=value")->take_all();
    cmd->add_option("--seed", seed, "seed for every random draw");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + s + "'");
      c.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

// Exclusive advisory lock on a sidecar file for the duration of a write.
class FileLock {
 public:
  explicit FileLock(const fs::path& model) : path_(model.string() + ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw DataError("cannot create lock file '" + path_ + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw DataError("model '" + model.string() + "' is locked by another process");
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

fs::path history_path(const fs::path& model) { return model.string() + ".history.json"; }

json read_history(const fs::path& model) {
  std::ifstream in(history_path(model));
  if (!in) return json{{"stages", json::array()}};
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("corrupt history '" + history_path(model).string() + "': " + e.what());
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    out << text;
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

DatasetOptions options_for(const json& stage, const RunConfig& fallback) {
  DatasetOptions o = fallback.data;
  if (stage.contains("data_options")) {
    const json& d = stage["data_options"];
    o.train_views = d.value("train_views", o.train_views);
    o.test_views = d.value("test_views", o.test_views);
    o.image_size = d.value("image_size", o.image_size);
    o.radius = d.value("camera_radius", o.radius);
    o.fov_x = d.value("fov_x", o.fov_x);
    o.oracle_samples = d.value("oracle_samples", o.oracle_samples);
  }
  return o;
}

int cmd_init(const fs::path& out, const ConfigFlags& flags, bool force) {
  const RunConfig cfg = flags.resolve();
  if (fs::exists(out) && !force) throw ContractError("'" + out.string() + "' exists; pass --force to overwrite");
  Prng prng(cfg.seed);
  const FactorizedModel model(cfg.model, prng);
  save_model(model, out);
  write_text_atomic(history_path(out), json{{"stages", json::array()}}.dump(2) + "\n");
  const StorageReport s = storage_report(model);
  std::printf("initialized %s: %zu shared parameters, %zu bytes\n", out.string().c_str(),
              model.count_parameters().shared(), s.total_bytes);
  return kOk;
}

int cmd_add_scene(const fs::path& model_path, const std::string& scene_id, std::string data,
                  const ConfigFlags& flags, bool quiet) {
  RunConfig cfg = flags.resolve();
  if (data.empty()) data = cfg.data_path;
  if (data.empty()) throw ContractError("add-scene needs --data");
  const FileLock lock(model_path);
  FactorizedModel model = load_model(model_path);
  if (model.has_scene(scene_id)) throw ConflictError("scene '" + scene_id + "' already exists in the model");
  const std::size_t stage = model.scenes().size();
  const std::uint64_t data_seed = cfg.seed + stage;
  const SceneDataset ds = load_dataset(data, cfg.data, data_seed);

  // Held-out views of every scene that can be reproduced without its
  // training images: builtin scenes are regenerated, external ones re-read
  // from their test split.
  json history = read_history(model_path);
  EvalSet eval = eval_views(ds, scene_id);
  for (const json& st : history["stages"]) {
    const std::string id = st.value("scene_id", "");
    const std::string src = st.value("source", "");
    if (!model.has_scene(id) || src.empty()) continue;
    try {
      const SceneDataset old = load_dataset(src, options_for(st, cfg), st.value("data_seed", std::uint64_t{0}));
      eval.merge(eval_views(old, id));
    } catch (const Error& e) {
      std::fprintf(stderr, "warning: no test views for '%s': %s\n", id.c_str(), e.what());
    }
  }

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed + stage;
  auto progress = [&](const LossPoint& p) {
    if (!quiet)
      std::fprintf(stderr, "step %6zu  loss %.6f  new %.6f  distill %+.4f\n", p.step, p.total, p.new_scene,
                   p.distill);
  };
  const StageReport report = train_stage(model, ds, scene_id, tc, &eval, progress);
  save_model(model, model_path);

  const fs::path report_path = model_path.string() + "." + scene_id + ".report.json";
  write_text_atomic(report_path, report.to_json() + "\n");
  json entry = json::parse(report.to_json());
  entry.erase("curve");
  entry["source"] = ds.source;
  entry["data_seed"] = data_seed;
  entry["data_options"] = {{"train_views", cfg.data.train_views},   {"test_views", cfg.data.test_views},
                           {"image_size", cfg.data.image_size},     {"camera_radius", cfg.data.radius},
                           {"fov_x", cfg.data.fov_x},               {"oracle_samples", cfg.data.oracle_samples}};
  history["stages"].push_back(entry);
  write_text_atomic(history_path(model_path), history.dump(2) + "\n");
  std::printf("%s", report.table().c_str());
  std::printf("report: %s\n", report_path.string().c_str());
  return kOk;
}

Camera read_pose_file(const fs::path& path, const Camera& intrinsics) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read pose file '" + path.string() + "'");
  std::vector<double> v;
  double x;
  while (in >> x) v.push_back(x);
  if (v.size() != 12 && v.size() != 16)
    throw DataError("pose file '" + path.string() + "' must hold a 3x4 or 4x4 camera-to-world matrix");
  Camera cam = intrinsics;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rotation[3 * r + c] = v[4 * r + c];
  }
  cam.position = {v[3], v[7], v[11]};
  validate_camera(cam);
  return cam;
}

Camera resized(Camera cam, std::uint32_t size) {
  if (size == 0 || size == cam.width) return cam;
  const double s = static_cast<double>(size) / cam.width;
  cam.focal *= s;
  cam.cx *= s;
  cam.cy *= s;
  cam.width = size;
  cam.height = static_cast<std::uint32_t>(std::lround(cam.height * s));
  return cam;
}

int cmd_render(const fs::path& model_path, const std::string& scene_id, const std::string& pose, std::uint32_t size,
               std::size_t samples, const fs::path& out, const std::string& float_dump, std::optional<std::uint64_t> seed) {
  const FactorizedModel model = load_model(model_path);
  const SceneRecord& rec = model.scene(scene_id);
  if (rec.frusta.views.empty()) throw LookupError("scene '" + scene_id + "' has no stored views");
  Camera cam;
  const bool numeric = !pose.empty() && pose.find_first_not_of("0123456789") == std::string::npos;
  if (numeric) {
    const std::size_t idx = std::stoul(pose);
    if (idx >= rec.frusta.views.size())
      throw LookupError("pose " + pose + " out of range; scene '" + scene_id + "' stores " +
                        std::to_string(rec.frusta.views.size()) + " views");
    cam = rec.frusta.views[idx];
  } else {
    cam = read_pose_file(pose, rec.frusta.views.front());
  }
  cam = resized(cam, size);
  // Without a seed the samples sit at bin midpoints.
  std::optional<Prng> prng;
  if (seed) prng.emplace(*seed);
  const Image img = render_image(model, scene_id, cam, samples, prng ? &*prng : nullptr);
  write_png(out, img);
  if (!float_dump.empty()) write_float_dump(float_dump, img);
  std::printf("wrote %s (%ux%u)\n", out.string().c_str(), img.width, img.height);
  return kOk;
}

int cmd_eval(const fs::path& model_path, const std::string& data_root, const ConfigFlags& flags,
             const std::string& json_out) {
  const RunConfig cfg = flags.resolve();
  const FactorizedModel model = load_model(model_path);
  const json history = read_history(model_path);
  json result = json::array();
  const bool deltas = model.scenes().size() > 1;
  std::printf("%-20s %10s %8s%s\n", "scene", "psnr", "ssim", deltas ? "    trained      delta" : "");
  for (const SceneRecord& s : model.scenes()) {
    json stage_entry;
    for (const json& st : history["stages"])
      if (st.value("scene_id", "") == s.id) stage_entry = st;
    std::optional<SceneDataset> ds;
    try {
      if (!data_root.empty() && fs::is_directory(fs::path(data_root) / s.id))
        ds = load_external(fs::path(data_root) / s.id);
      else if (!s.source.empty())
        ds = load_dataset(s.source, options_for(stage_entry, cfg), stage_entry.value("data_seed", std::uint64_t{0}));
    } catch (const Error& e) {
      std::fprintf(stderr, "warning: skipping '%s': %s\n", s.id.c_str(), e.what());
    }
    if (!ds || ds->test_count() == 0) {
      std::fprintf(stderr, "warning: skipping '%s': no test views\n", s.id.c_str());
      continue;
    }
    double total_mse = 0.0, total_ssim = 0.0;
    for (std::size_t i = 0; i < ds->test_count(); ++i) {
      const Image img = render_image(model, s.id, ds->test_camera(i), cfg.render_samples, nullptr);
      total_mse += mse(img, ds->test_image(i));
      total_ssim += ssim(img, ds->test_image(i));
    }
    const double n = static_cast<double>(ds->test_count());
    const double p = total_mse == 0.0 ? kPsnrIdentical : -10.0 * std::log10(total_mse / n);
    json row{{"id", s.id}, {"psnr", p}, {"ssim", total_ssim / n}};
    double trained = std::nan("");
    if (stage_entry.contains("scenes"))
      for (const json& m : stage_entry["scenes"])
        if (m.value("id", "") == s.id && m.contains("psnr_after") && m["psnr_after"].is_number())
          trained = m["psnr_after"].get<double>();
    if (deltas && std::isfinite(trained)) {
      row["psnr_when_trained"] = trained;
      row["delta"] = p - trained;
      std::printf("%-20s %10.2f %8.4f %10.2f %+10.2f\n", s.id.c_str(), p, total_ssim / n, trained, p - trained);
    } else {
      std::printf("%-20s %10.2f %8.4f\n", s.id.c_str(), p, total_ssim / n);
    }
    result.push_back(row);
  }
  if (!json_out.empty()) write_text_atomic(json_out, result.dump(2) + "\n");
  return kOk;
}

int cmd_size(const fs::path& model_path, std::size_t extrapolate_to) {
  const FactorizedModel model = load_model(model_path);
  const StorageReport r = storage_report(model);
  const auto mb = [](std::size_t b) { return static_cast<double>(b) / (1024.0 * 1024.0); };
  std::printf("header         %10zu bytes\n", r.header_bytes);
  std::printf("shared         %10zu bytes (%.4f MB)\n", r.shared_bytes, mb(r.shared_bytes));
  for (const auto& s : r.scenes)
    std::printf("scene %-8s %10zu bytes (%zu parameter bytes)\n", s.id.c_str(), s.record_bytes, s.parameter_bytes);
  std::printf("total          %10zu bytes (%.4f MB)\n", r.total_bytes, mb(r.total_bytes));
  std::printf("\n%8s %14s %10s\n", "scenes", "bytes", "MB");
  for (std::size_t n = 1; n <= extrapolate_to; ++n)
    std::printf("%8zu %14zu %10.4f\n", n, r.extrapolate(n), mb(r.extrapolate(n)));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scene factorized radiance fields with continual learning"};
  app.require_subcommand(1);

  fs::path out, model_path;
  std::string scene_id, data, pose = "0", float_dump, data_root, json_out;
  bool force = false, quiet = false;
  std::uint32_t size = 0;
  std::size_t samples = 0, extrapolate_to = 8;
  std::optional<std::uint64_t> render_seed;
  ConfigFlags init_flags, add_flags, eval_flags;

  auto* init = app.add_subcommand("init", "create a model with no scenes");
  init->add_option("--out", out, "model file to create")->required();
  init->add_flag("--force", force, "overwrite an existing file");
  init_flags.attach(init);

  auto* add = app.add_subcommand("add-scene", "train one new scene into the model");
  add->add_option("--model", model_path, "model file")->required();
  add->add_option("--scene-id", scene_id, "identifier of the new scene")->required();
  add->add_option("--data", data, "dataset directory or builtin:<name>");
  add->add_flag("--quiet", quiet, "no progress output");
  add_flags.attach(add);

  auto* render = app.add_subcommand("render", "render one view of a trained scene");
  render->add_option("--model", model_path, "model file")->required();
  render->add_option("--scene-id", scene_id, "scene to render")->required();
  render->add_option("--pose", pose, "stored view index or a camera-to-world matrix file");
  render->add_option("--size", size, "output width in pixels (keeps the field of view)");
  render->add_option("--samples", samples, "samples per ray");
  render->add_option("--out", out, "PNG output")->required();
  render->add_option("--float-dump", float_dump, "also write a lossless float image");
  render->add_option("--seed", render_seed, "jitter samples with this seed");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of every scene on its test views");
  eval->add_option("--model", model_path, "model file")->required();
  eval->add_option("--data-root", data_root, "directory with one dataset per scene id");
  eval->add_option("--json", json_out, "write the metrics as JSON");
  eval_flags.attach(eval);

  auto* sz = app.add_subcommand("size", "storage breakdown and extrapolation");
  sz->add_option("--model", model_path, "model file")->required();
  sz->add_option("--extrapolate", extrapolate_to, "extrapolate up to this many scenes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*init) return cmd_init(out, init_flags, force);
    if (*add) return cmd_add_scene(model_path, scene_id, data, add_flags, quiet);
    if (*render) return cmd_render(model_path, scene_id, pose, size, samples ? samples : 64, out, float_dump,
                                   render_seed);
    if (*eval) return cmd_eval(model_path, data_root, eval_flags, json_out);
    if (*sz) return cmd_size(model_path, extrapolate_to);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
