#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "scarf/distillation.hpp"
#include "scarf/errors.hpp"
#include "scarf/metrics.hpp"
#include "scarf/model_io.hpp"
#include "scarf/rendering.hpp"
#include "scarf/run_config.hpp"
#include "scarf/trainer.hpp"

namespace py = pybind11;
using namespace scarf;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Image& img) {
  py::array_t<double> out({static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width), py::ssize_t{3}});
  std::copy(img.rgb.begin(), img.rgb.end(), out.mutable_data());
  return out;
}

Image to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw DimensionError("expected an H x W x 3 array");
  Image img(static_cast<std::uint32_t>(a.shape(1)), static_cast<std::uint32_t>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.rgb.begin());
  return img;
}

Matrix to_matrix(const Array& a, std::size_t cols, const char* what) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(1)) != cols)
    throw DimensionError(std::string(what) + " must be an N x " + std::to_string(cols) + " array");
  Matrix m(a.shape(0), cols);
  std::copy(a.data(), a.data() + a.size(), m.values().begin());
  return m;
}

py::array_t<double> from_matrix(const Matrix& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Vec3 to_vec3(const std::array<double, 3>& v) { return {v[0], v[1], v[2]}; }

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

py::dict counts_dict(const ParameterCount& c) {
  py::dict d;
  d["per_scene"] = c.per_scene;
  d["scenes"] = c.scenes;
  d["generator"] = c.generator;
  d["cswm"] = c.cswm;
  d["encoder_bias"] = c.encoder_bias;
  d["decoder"] = c.decoder;
  d["uncertainty"] = c.uncertainty;
  d["shared"] = c.shared();
  d["total"] = c.total();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-scene factorized radiance fields with continual learning";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", error);
  py::register_exception<ContractError>(m, "ContractError", error);
  py::register_exception<LookupError>(m, "LookupError", error);
  py::register_exception<ConflictError>(m, "ConflictError", error);
  py::register_exception<DataError>(m, "DataError", error);
  py::register_exception<NumericalError>(m, "NumericalError", error);

  py::class_<RunConfig>(m, "RunConfig", "Model, training and dataset settings addressed by key")
      .def(py::init<>())
      .def_static("parse", &RunConfig::parse, py::arg("text"))
      .def_static("load", &RunConfig::load, py::arg("path"))
      .def_static("keys", &RunConfig::keys)
      .def("set", [](RunConfig& c, const std::string& key, const std::string& value) { c.set(key, value); })
      .def("dump", &RunConfig::dump)
      .def("validate", &RunConfig::validate)
      .def_readwrite("seed", &RunConfig::seed);

  py::class_<Camera>(m, "Camera")
      .def_static(
          "look_at",
          [](std::array<double, 3> eye, std::array<double, 3> target, std::array<double, 3> up, double fov_x,
             std::uint32_t width, std::uint32_t height) {
            return Camera::look_at(to_vec3(eye), to_vec3(target), to_vec3(up), fov_x, width, height);
          },
          py::arg("eye"), py::arg("target") = std::array<double, 3>{0, 0, 0},
          py::arg("up") = std::array<double, 3>{0, 1, 0}, py::arg("fov_x") = 0.7, py::arg("width") = 32,
          py::arg("height") = 32)
      .def_property_readonly("width", [](const Camera& c) { return c.width; })
      .def_property_readonly("height", [](const Camera& c) { return c.height; })
      .def_property_readonly("focal", [](const Camera& c) { return c.focal; })
      .def_property_readonly("position", [](const Camera& c) { return std::array{c.position.x, c.position.y, c.position.z}; })
      .def_property_readonly("rotation", [](const Camera& c) { return c.rotation; });

  py::class_<SceneDataset>(m, "Dataset")
      .def_readonly("source", &SceneDataset::source)
      .def_readonly("near", &SceneDataset::near)
      .def_readonly("far", &SceneDataset::far)
      .def_readonly("white_background", &SceneDataset::white_background)
      .def_property_readonly("train_count", &SceneDataset::train_count)
      .def_property_readonly("test_count", &SceneDataset::test_count)
      .def_property_readonly("image_reads", &SceneDataset::image_reads)
      .def("train_camera", &SceneDataset::train_camera, py::arg("index"))
      .def("test_camera", &SceneDataset::test_camera, py::arg("index"))
      .def("train_image", [](const SceneDataset& d, std::size_t i) { return to_numpy(d.train_image(i)); }, py::arg("index"))
      .def("test_image", [](const SceneDataset& d, std::size_t i) { return to_numpy(d.test_image(i)); }, py::arg("index"));

  m.def(
      "load_dataset",
      [](const std::string& source, const RunConfig& config, std::uint64_t seed) {
        return load_dataset(source, config.data, seed);
      },
      py::arg("source"), py::arg("config") = RunConfig{}, py::arg("seed") = 0,
      "A builtin toy scene ('builtin:<name>') or a directory with transforms_*.json");
  m.def("builtin_names", &builtin_names);

  py::class_<FactorizedModel>(m, "Model")
      .def(py::init([](const RunConfig& config, std::uint64_t seed) {
             config.validate();
             Prng prng(seed);
             return FactorizedModel(config.model, prng);
           }),
           py::arg("config") = RunConfig{}, py::arg("seed") = 0)
      .def_property_readonly("scene_ids",
                             [](const FactorizedModel& model) {
                               std::vector<std::string> ids;
                               for (const SceneRecord& s : model.scenes()) ids.push_back(s.id);
                               return ids;
                             })
      .def_property_readonly("beta", [](const FactorizedModel& model) { return std::pair{model.beta1(), model.beta2()}; })
      .def("parameter_counts", [](const FactorizedModel& model) { return counts_dict(model.count_parameters()); })
      .def(
          "render",
          [](const FactorizedModel& model, const std::string& scene, const Camera& camera, std::size_t samples) {
            Image img;
            {
              py::gil_scoped_release release;
              img = render_image(model, scene, camera, samples, nullptr);
            }
            return to_numpy(img);
          },
          py::arg("scene"), py::arg("camera"), py::arg("samples") = 64)
      .def(
          "query",
          [](const FactorizedModel& model, const std::string& scene, const Array& points, const Array& directions) {
            const Matrix pos = to_matrix(points, 3, "points"), dirs = to_matrix(directions, 3, "directions");
            Tape tape(false);
            const FieldVars f = query_field(tape, bind_scene(tape, model, scene), pos, dirs);
            const Matrix& sigma = f.sigma.value();
            py::array_t<double> s(static_cast<py::ssize_t>(sigma.size()));
            std::copy(sigma.values().begin(), sigma.values().end(), s.mutable_data());
            return py::make_tuple(s, from_matrix(f.rgb.value()));
          },
          py::arg("scene"), py::arg("points"), py::arg("directions"),
          "Density (N,) and colour (N, 3) at unit-direction queries")
      .def("save", [](const FactorizedModel& model, const std::filesystem::path& path) { save_model(model, path); })
      .def("to_bytes", [](const FactorizedModel& model) { return py::bytes(serialize_model(model)); })
      .def("storage_report", [](const FactorizedModel& model) { return parse_json(storage_report(model).to_json()); });

  m.def("load_model", &load_model, py::arg("path"));
  m.def(
      "model_from_bytes", [](const py::bytes& b) { return deserialize_model(std::string(b)); }, py::arg("data"));

  m.def(
      "train_stage",
      [](FactorizedModel& model, const SceneDataset& data, const std::string& scene_id, const RunConfig& config,
         const std::vector<std::pair<const SceneDataset*, std::string>>& evaluate,
         const std::function<void(py::dict)>& progress) {
        config.validate();
        EvalSet eval;
        for (const auto& [d, id] : evaluate) eval.merge(eval_views(*d, id));
        ProgressFn fn;
        if (progress)
          fn = [&progress](const LossPoint& p) {
            py::gil_scoped_acquire acquire;
            py::dict d;
            d["step"] = p.step;
            d["total"] = p.total;
            d["new_scene"] = p.new_scene;
            d["distill"] = p.distill;
            d["beta1"] = p.beta1;
            d["beta2"] = p.beta2;
            progress(d);
          };
        StageReport report;
        {
          py::gil_scoped_release release;
          report = train_stage(model, data, scene_id, config.train, eval.empty() ? nullptr : &eval, fn);
        }
        return parse_json(report.to_json());
      },
      py::arg("model"), py::arg("data"), py::arg("scene_id"), py::arg("config") = RunConfig{},
      py::arg("evaluate") = std::vector<std::pair<const SceneDataset*, std::string>>{},
      py::arg("progress") = std::function<void(py::dict)>{},
      "Adds and trains one scene; `evaluate` lists (dataset, scene id) pairs whose test views are scored");

  m.def(
      "psnr", [](const Array& a, const Array& b) { return psnr(to_image(a), to_image(b)); }, py::arg("a"), py::arg("b"));
  m.def(
      "ssim", [](const Array& a, const Array& b) { return ssim(to_image(a), to_image(b)); }, py::arg("a"), py::arg("b"),
      "Gaussian-window SSIM (11 taps, sigma 1.5) averaged over channels");

  m.def(
      "composite",
      [](const std::vector<double>& sigma, const Array& rgb, const std::vector<double>& t,
         const std::vector<double>& delta, bool white_background) {
        const Matrix colors = to_matrix(rgb, 3, "rgb");
        const CompositeResult r = composite(sigma, colors.values(), t, delta, white_background);
        py::dict d;
        d["color"] = std::array{r.color.x, r.color.y, r.color.z};
        d["weights"] = r.weights;
        d["transmittance"] = r.transmittance;
        d["depth"] = r.depth;
        return d;
      },
      py::arg("sigma"), py::arg("rgb"), py::arg("t"), py::arg("delta"), py::arg("white_background") = false);

  m.def(
      "oracle_render",
      [](const std::string& builtin, const Camera& camera, std::size_t samples, double near, double far,
         bool white_background) {
        return to_numpy(oracle_render(builtin_field(builtin), camera, samples, near, far, white_background));
      },
      py::arg("builtin"), py::arg("camera"), py::arg("samples") = 256, py::arg("near") = 2.0, py::arg("far") = 6.0,
      py::arg("white_background") = true);

  m.def(
      "occupancy",
      [](const FactorizedModel& model, const std::string& scene, std::size_t resolution, std::size_t subgrid,
         double tau) {
        const OccupancyGrid g = extract_occupancy(model, scene, Aabb{}, GridSpec{resolution, subgrid, tau});
        py::array_t<bool> out({static_cast<py::ssize_t>(resolution), static_cast<py::ssize_t>(resolution),
                               static_cast<py::ssize_t>(resolution)});
        std::copy(g.occupied.begin(), g.occupied.end(), out.mutable_data());
        return out;
      },
      py::arg("model"), py::arg("scene"), py::arg("resolution") = 32, py::arg("subgrid") = 3, py::arg("tau") = 3.0,
      "Cells of the default box whose density exceeds tau on a subgrid lattice");
}
