#include "scarf/model_io.hpp"

#include <unistd.h>

#include <json.hpp>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "scarf/errors.hpp"

namespace scarf {

namespace {

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

class Writer {
 public:
  template <class T>
  void put(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void put_matrix(const Matrix& m) {
    for (double v : m.values()) put<float>(static_cast<float>(v));
  }
  std::size_t size() const { return buf_.size(); }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw DataError("model file is truncated");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (pos_ + n > bytes_.size()) throw DataError("model file is truncated");
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void get_matrix(Matrix& m) {
    for (double& v : m.values()) v = static_cast<double>(get<float>());
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

bool is_scene_parameter(const std::string& name) { return name.starts_with("scene."); }

void write_config(Writer& w, const ModelConfig& c) {
  for (std::size_t v : {c.layers, c.width, c.rank, c.noise_dim, c.pos_degrees, c.dir_degrees, c.skip_layer,
                        c.decoder_hidden, c.generator_hidden})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint8_t>(c.use_generator);
  w.put<std::uint8_t>(c.use_coefficients);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  for (std::size_t* v : {&c.layers, &c.width, &c.rank, &c.noise_dim, &c.pos_degrees, &c.dir_degrees, &c.skip_layer,
                         &c.decoder_hidden, &c.generator_hidden})
    *v = r.get<std::uint32_t>();
  c.use_generator = r.get<std::uint8_t>() != 0;
  c.use_coefficients = r.get<std::uint8_t>() != 0;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw DataError(std::string("model file holds an invalid ") + e.what());
  }
  return c;
}

void write_frusta(Writer& w, const SceneFrusta& f) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.views.size()));
  for (const Camera& c : f.views) {
    for (double v : c.rotation) w.put<double>(v);
    for (double v : {c.position.x, c.position.y, c.position.z, c.focal, c.cx, c.cy}) w.put<double>(v);
    w.put<std::uint32_t>(c.width);
    w.put<std::uint32_t>(c.height);
  }
  w.put<double>(f.near);
  w.put<double>(f.far);
  w.put<std::uint8_t>(f.white_background);
}

SceneFrusta read_frusta(Reader& r) {
  SceneFrusta f;
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    Camera c;
    for (double& v : c.rotation) v = r.get<double>();
    for (double* v : {&c.position.x, &c.position.y, &c.position.z, &c.focal, &c.cx, &c.cy}) *v = r.get<double>();
    c.width = r.get<std::uint32_t>();
    c.height = r.get<std::uint32_t>();
    f.views.push_back(c);
  }
  f.near = r.get<double>();
  f.far = r.get<double>();
  f.white_background = r.get<std::uint8_t>() != 0;
  return f;
}

struct Layout {
  std::size_t header_end = 0;
  std::size_t shared_end = 0;
  std::vector<SceneStorage> scenes;
};

std::string serialize(const FactorizedModel& model, Layout* layout) {
  Writer w;
  w.put<char>('S');
  w.put<char>('C');
  w.put<char>('R');
  w.put<char>('F');
  w.put<std::uint32_t>(kModelFormatVersion);
  write_config(w, model.config());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.scenes().size()));
  const std::size_t header_end = w.size();
  model.for_each_parameter([&](const std::string& name, const Tensor& t) {
    if (!is_scene_parameter(name)) w.put_matrix(t.value());
  });
  const std::size_t shared_end = w.size();
  std::vector<SceneStorage> scenes;
  for (const SceneRecord& s : model.scenes()) {
    const std::size_t start = w.size();
    w.put_string(s.id);
    w.put_string(s.source);
    const std::size_t params_start = w.size();
    for (const Matrix& z : s.noise) w.put_matrix(z);
    for (const Tensor& c : s.coefficients) w.put_matrix(c.value());
    for (const Tensor& m : s.direct_sswm) w.put_matrix(m.value());
    const std::size_t params_end = w.size();
    write_frusta(w, s.frusta);
    scenes.push_back({s.id, params_end - params_start, w.size() - start});
  }
  if (layout) *layout = {header_end, shared_end, std::move(scenes)};
  return w.take();
}

}  // namespace

std::string serialize_model(const FactorizedModel& model) { return serialize(model, nullptr); }

FactorizedModel deserialize_model(std::string_view bytes) {
  Reader r(bytes);
  char magic[4];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, "SCRF", 4) != 0) throw DataError("not a model file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version > kModelFormatVersion)
    throw DataError("model file format version " + std::to_string(version) + " is newer than the supported version " +
                    std::to_string(kModelFormatVersion));
  if (version == 0) throw DataError("model file has invalid format version 0");
  const ModelConfig config = read_config(r);
  const auto scene_count = r.get<std::uint32_t>();

  Prng unused(0);
  FactorizedModel model(config, unused);
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    if (!is_scene_parameter(name)) r.get_matrix(t.value());
  });
  for (std::uint32_t i = 0; i < scene_count; ++i) {
    SceneRecord rec;
    rec.id = r.get_string();
    rec.source = r.get_string();
    if (rec.id.empty()) throw DataError("model file has a scene with an empty id");
    for (std::size_t l = 0; l < config.layers && config.use_generator; ++l) {
      Matrix z(1, config.noise_dim);
      r.get_matrix(z);
      rec.noise.push_back(std::move(z));
    }
    for (std::size_t l = 0; l < config.layers && config.use_coefficients; ++l) {
      Matrix c(config.rank, config.rank);
      r.get_matrix(c);
      rec.coefficients.emplace_back(std::move(c), true);
    }
    for (std::size_t l = 0; l < config.layers && !config.use_generator; ++l) {
      Matrix m(config.in_dim(l), config.rank);
      r.get_matrix(m);
      rec.direct_sswm.emplace_back(std::move(m), true);
    }
    rec.frusta = read_frusta(r);
    if (model.has_scene(rec.id)) throw DataError("model file repeats scene id '" + rec.id + "'");
    model.mutable_scenes().push_back(std::move(rec));
  }
  if (!r.done()) throw DataError("model file has trailing bytes");
  return model;
}

void save_model(const FactorizedModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_model(model);
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw DataError("failed writing '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw DataError("cannot replace '" + path.string() + "': " + ec.message());
  }
}

FactorizedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

std::size_t StorageReport::extrapolate(std::size_t scene_count) const {
  const std::size_t per = scenes.empty() ? per_scene_parameter_bytes : scenes.back().record_bytes;
  std::size_t total = header_bytes + shared_bytes;
  for (std::size_t i = 0; i < scene_count; ++i) total += i < scenes.size() ? scenes[i].record_bytes : per;
  return total;
}

std::string StorageReport::to_json() const {
  nlohmann::json j;
  j["header_bytes"] = header_bytes;
  j["shared_bytes"] = shared_bytes;
  j["per_scene_parameter_bytes"] = per_scene_parameter_bytes;
  j["total_bytes"] = total_bytes;
  j["scenes"] = nlohmann::json::array();
  for (const auto& s : scenes)
    j["scenes"].push_back({{"id", s.id}, {"parameter_bytes", s.parameter_bytes}, {"record_bytes", s.record_bytes}});
  return j.dump(2);
}

StorageReport storage_report(const FactorizedModel& model) {
  Layout layout;
  const std::string bytes = serialize(model, &layout);
  StorageReport r;
  r.header_bytes = layout.header_end;
  r.shared_bytes = layout.shared_end - layout.header_end;
  r.scenes = std::move(layout.scenes);
  r.per_scene_parameter_bytes = model.count_parameters().per_scene * sizeof(float);
  r.total_bytes = bytes.size();
  return r;
}

}  // namespace scarf
