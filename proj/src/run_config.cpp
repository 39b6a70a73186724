#include "scarf/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "scarf/errors.hpp"

namespace scarf {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ContractError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                      expected);
}

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    bad_value(key, value, std::is_floating_point_v<T> ? "a number" : "a nonnegative integer");
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  bad_value(key, value, "a boolean");
}

Vec3 parse_vec3(std::string_view key, std::string_view value) {
  if (value.find(',') == std::string_view::npos) {
    const double v = parse_number<double>(key, value);
    return {v, v, v};
  }
  double c[3];
  for (int i = 0; i < 3; ++i) {
    const auto comma = value.find(',');
    if ((i < 2) == (comma == std::string_view::npos)) bad_value(key, value, "x,y,z");
    c[i] = parse_number<double>(key, trim(value.substr(0, comma)));
    value = i < 2 ? value.substr(comma + 1) : std::string_view{};
  }
  return {c[0], c[1], c[2]};
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_vec3(const Vec3& v) {
  return format_double(v.x) + "," + format_double(v.y) + "," + format_double(v.z);
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, std::string_view key, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Key size_key(const char* name, T RunConfig::*section, std::size_t T::*field) {
  return {name, [=](RunConfig& c, std::string_view k, std::string_view v) {
            (c.*section).*field = parse_number<std::size_t>(k, v);
          },
          [=](const RunConfig& c) { return std::to_string((c.*section).*field); }};
}

template <class T>
Key double_key(const char* name, T RunConfig::*section, double T::*field) {
  return {name, [=](RunConfig& c, std::string_view k, std::string_view v) {
            (c.*section).*field = parse_number<double>(k, v);
          },
          [=](const RunConfig& c) { return format_double((c.*section).*field); }};
}

template <class T>
Key bool_key(const char* name, T RunConfig::*section, bool T::*field) {
  return {name, [=](RunConfig& c, std::string_view k, std::string_view v) { (c.*section).*field = parse_bool(k, v); },
          [=](const RunConfig& c) { return std::string((c.*section).*field ? "true" : "false"); }};
}

const std::vector<Key>& key_table() {
  using R = RunConfig;
  static const std::vector<Key> table = {
      {"preset", [](R& c, std::string_view k, std::string_view v) {
         if (v == "desk") {
           c.model = ModelConfig::desk();
           c.train = TrainConfig::desk();
         } else if (v == "paper") {
           c.model = ModelConfig::paper();
           c.train = TrainConfig::paper();
         } else {
           bad_value(k, v, "desk or paper");
         }
         c.preset = v;
       },
       [](const R& c) { return c.preset; }},
      {"seed", [](R& c, std::string_view k, std::string_view v) { c.seed = parse_number<std::uint64_t>(k, v); },
       [](const R& c) { return std::to_string(c.seed); }},
      size_key("layers", &R::model, &ModelConfig::layers),
      size_key("width", &R::model, &ModelConfig::width),
      size_key("rank", &R::model, &ModelConfig::rank),
      size_key("noise_dim", &R::model, &ModelConfig::noise_dim),
      size_key("pos_degrees", &R::model, &ModelConfig::pos_degrees),
      size_key("dir_degrees", &R::model, &ModelConfig::dir_degrees),
      size_key("skip_layer", &R::model, &ModelConfig::skip_layer),
      size_key("decoder_hidden", &R::model, &ModelConfig::decoder_hidden),
      size_key("generator_hidden", &R::model, &ModelConfig::generator_hidden),
      bool_key("use_generator", &R::model, &ModelConfig::use_generator),
      bool_key("use_coefficients", &R::model, &ModelConfig::use_coefficients),
      double_key("lr_matrices", &R::train, &TrainConfig::lr_matrices),
      double_key("lr_matrices_end", &R::train, &TrainConfig::lr_matrices_end),
      double_key("lr_generator", &R::train, &TrainConfig::lr_generator),
      double_key("lr_generator_end", &R::train, &TrainConfig::lr_generator_end),
      double_key("lr_beta", &R::train, &TrainConfig::lr_beta),
      double_key("adam_beta1", &R::train, &TrainConfig::adam_beta1),
      double_key("adam_beta2", &R::train, &TrainConfig::adam_beta2),
      double_key("adam_eps", &R::train, &TrainConfig::adam_eps),
      double_key("alpha", &R::train, &TrainConfig::alpha),
      double_key("gamma", &R::train, &TrainConfig::gamma),
      size_key("new_scene_rays", &R::train, &TrainConfig::new_scene_rays),
      size_key("distill_rays", &R::train, &TrainConfig::distill_rays),
      size_key("distill_points", &R::train, &TrainConfig::distill_points),
      size_key("warmup_steps", &R::train, &TrainConfig::warmup_steps),
      size_key("total_steps", &R::train, &TrainConfig::total_steps),
      size_key("samples_per_ray", &R::train, &TrainConfig::samples_per_ray),
      {"grid_resolution",
       [](R& c, std::string_view k, std::string_view v) { c.train.grid.resolution = parse_number<std::size_t>(k, v); },
       [](const R& c) { return std::to_string(c.train.grid.resolution); }},
      {"grid_subgrid",
       [](R& c, std::string_view k, std::string_view v) { c.train.grid.subgrid = parse_number<std::size_t>(k, v); },
       [](const R& c) { return std::to_string(c.train.grid.subgrid); }},
      {"tau", [](R& c, std::string_view k, std::string_view v) { c.train.grid.tau = parse_number<double>(k, v); },
       [](const R& c) { return format_double(c.train.grid.tau); }},
      {"grid_min", [](R& c, std::string_view k, std::string_view v) { c.train.grid_aabb.lo = parse_vec3(k, v); },
       [](const R& c) { return format_vec3(c.train.grid_aabb.lo); }},
      {"grid_max", [](R& c, std::string_view k, std::string_view v) { c.train.grid_aabb.hi = parse_vec3(k, v); },
       [](const R& c) { return format_vec3(c.train.grid_aabb.hi); }},
      bool_key("distill", &R::train, &TrainConfig::distill),
      bool_key("field_distill", &R::train, &TrainConfig::field_distill),
      bool_key("pixel_distill", &R::train, &TrainConfig::pixel_distill),
      bool_key("learn_beta", &R::train, &TrainConfig::learn_beta),
      bool_key("surface_restriction", &R::train, &TrainConfig::surface_restriction),
      bool_key("field_loss_squared", &R::train, &TrainConfig::field_loss_squared),
      bool_key("freeze_shared", &R::train, &TrainConfig::freeze_shared),
      bool_key("freeze_old_scenes", &R::train, &TrainConfig::freeze_old_scenes),
      size_key("log_every", &R::train, &TrainConfig::log_every),
      size_key("eval_samples", &R::train, &TrainConfig::eval_samples),
      size_key("train_views", &R::data, &DatasetOptions::train_views),
      size_key("test_views", &R::data, &DatasetOptions::test_views),
      {"image_size",
       [](R& c, std::string_view k, std::string_view v) { c.data.image_size = parse_number<std::uint32_t>(k, v); },
       [](const R& c) { return std::to_string(c.data.image_size); }},
      double_key("camera_radius", &R::data, &DatasetOptions::radius),
      double_key("fov_x", &R::data, &DatasetOptions::fov_x),
      size_key("oracle_samples", &R::data, &DatasetOptions::oracle_samples),
      {"render_samples",
       [](R& c, std::string_view k, std::string_view v) { c.render_samples = parse_number<std::size_t>(k, v); },
       [](const R& c) { return std::to_string(c.render_samples); }},
      {"model_path", [](R& c, std::string_view, std::string_view v) { c.model_path = v; },
       [](const R& c) { return c.model_path; }},
      {"data", [](R& c, std::string_view, std::string_view v) { c.data_path = v; },
       [](const R& c) { return c.data_path; }},
  };
  return table;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const Key& k : key_table())
    if (key == k.name) {
      k.set(*this, key, trim(value));
      return;
    }
  throw ContractError("unknown config key '" + std::string(key) + "'");
}

RunConfig RunConfig::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ContractError("config line " + std::to_string(line_no) + ": expected key = value");
    pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  RunConfig c;
  for (const auto& [k, v] : pairs)
    if (k == "preset") c.set(k, v);
  for (const auto& [k, v] : pairs)
    if (k != "preset") c.set(k, v);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::dump() const {
  std::string out;
  for (const Key& k : key_table()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> names;
  for (const Key& k : key_table()) names.emplace_back(k.name);
  return names;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.image_size == 0) throw ContractError("config: image_size must be positive");
  if (render_samples == 0) throw ContractError("config: render_samples must be positive");
}

}  // namespace scarf
