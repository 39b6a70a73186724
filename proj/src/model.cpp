#include "scarf/model.hpp"

#include <cmath>
#include <numbers>

#include "scarf/errors.hpp"

namespace scarf {

namespace {

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Prng& prng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = prng.uniform(-bound, bound);
  return m;
}

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_matrix(Matrix& m) {
  for (double& v : m.values()) v = round_to_float(v);
}

}  // namespace

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.layers = 4;
  c.width = 64;
  c.rank = 8;
  c.noise_dim = 8;
  c.skip_layer = 3;
  c.decoder_hidden = 64;
  c.generator_hidden = 64;
  return c;
}

void ModelConfig::validate() const {
  if (layers < 2) throw ContractError("config: layers must be >= 2");
  if (width < 1) throw ContractError("config: width must be >= 1");
  if (rank < 1) throw ContractError("config: rank must be >= 1");
  if (noise_dim < 1) throw ContractError("config: noise_dim must be >= 1");
  if (skip_layer < 2 || skip_layer > layers - 1)
    throw ContractError("config: skip_layer must lie in [2, layers - 1]");
  if (decoder_hidden < 1) throw ContractError("config: decoder_hidden must be >= 1");
  if (generator_hidden < 1) throw ContractError("config: generator_hidden must be >= 1");
}

std::size_t ModelConfig::in_dim(std::size_t layer) const {
  if (layer == 0) return pos_dim();
  if (layer + 1 == skip_layer) return width + pos_dim();
  return width;
}

std::size_t ModelConfig::out_dim(std::size_t layer) const { return layer + 1 == layers ? width + 1 : width; }

std::vector<double> positional_encode(std::span<const double> p, std::size_t degrees) {
  std::vector<double> out(p.begin(), p.end());
  out.reserve(p.size() * (1 + 2 * degrees));
  for (std::size_t k = 0; k < degrees; ++k) {
    const double freq = std::ldexp(std::numbers::pi, static_cast<int>(k));
    for (double v : p) out.push_back(std::sin(freq * v));
    for (double v : p) out.push_back(std::cos(freq * v));
  }
  return out;
}

Matrix positional_encode_rows(const Matrix& points, std::size_t degrees) {
  const std::size_t d = points.cols();
  Matrix out(points.rows(), d * (1 + 2 * degrees));
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const std::vector<double> enc = positional_encode(points.row(r), degrees);
    std::copy(enc.begin(), enc.end(), out.row(r).begin());
  }
  return out;
}

FactorizedModel::FactorizedModel(const ModelConfig& config, Prng& prng) : config_(config) {
  config_.validate();
  const std::size_t L = config_.layers, K = config_.rank, Z = config_.noise_dim, H = config_.generator_hidden;
  for (std::size_t l = 0; l < L; ++l) {
    Prng layer_rng = prng.split(100 + l);
    const std::size_t in = config_.in_dim(l), out = config_.out_dim(l);
    cswm_.emplace_back(uniform_matrix(K, out, fan_in_bound(K), layer_rng), true);
    encoder_bias_.emplace_back(uniform_matrix(1, out, fan_in_bound(in), layer_rng), true);
    GeneratorWeights g;
    if (config_.use_generator) {
      g.w1 = Tensor(uniform_matrix(Z, H, fan_in_bound(Z), layer_rng), true);
      g.b1 = Tensor(uniform_matrix(1, H, fan_in_bound(Z), layer_rng), true);
      g.w2 = Tensor(uniform_matrix(H, in * K, fan_in_bound(H), layer_rng), true);
      g.b2 = Tensor(uniform_matrix(1, in * K, fan_in_bound(H), layer_rng), true);
    }
    generators_.push_back(std::move(g));
  }
  Prng dec_rng = prng.split(200);
  const std::size_t dec_in = config_.width + config_.dir_dim();
  decoder_.w1 = Tensor(uniform_matrix(dec_in, config_.decoder_hidden, fan_in_bound(dec_in), dec_rng), true);
  decoder_.b1 = Tensor(uniform_matrix(1, config_.decoder_hidden, fan_in_bound(dec_in), dec_rng), true);
  decoder_.w2 = Tensor(uniform_matrix(config_.decoder_hidden, 3, fan_in_bound(config_.decoder_hidden), dec_rng), true);
  decoder_.b2 = Tensor(uniform_matrix(1, 3, fan_in_bound(config_.decoder_hidden), dec_rng), true);
  log_beta1_ = Tensor(Matrix::scalar(std::log(0.045)), true);
  log_beta2_ = Tensor(Matrix::scalar(std::log(0.06)), true);
  round_to_storage_precision();
}

double FactorizedModel::beta1() const { return std::exp(log_beta1_.value()[0]); }
double FactorizedModel::beta2() const { return std::exp(log_beta2_.value()[0]); }

const SceneRecord& FactorizedModel::add_scene(std::string id, SceneFrusta frusta, Prng& prng, std::string source) {
  if (id.empty()) throw ContractError("scene id must not be empty");
  if (has_scene(id)) throw ConflictError("scene '" + id + "' already exists");
  const std::size_t L = config_.layers, K = config_.rank, Z = config_.noise_dim;
  SceneRecord rec;
  rec.id = std::move(id);
  rec.source = std::move(source);
  rec.frusta = std::move(frusta);
  for (std::size_t l = 0; l < L; ++l) {
    if (config_.use_generator) {
      Matrix z(1, Z);
      for (double& v : z.values()) v = round_to_float(prng.normal());
      rec.noise.push_back(std::move(z));
    } else {
      const std::size_t in = config_.in_dim(l);
      Matrix sswm = uniform_matrix(in, K, fan_in_bound(in), prng);
      round_matrix(sswm);
      rec.direct_sswm.emplace_back(std::move(sswm), true);
    }
    if (config_.use_coefficients) {
      Matrix c = Matrix::identity(K);
      for (double& v : c.values()) v = round_to_float(v + 0.01 * prng.normal());
      rec.coefficients.emplace_back(std::move(c), true);
    }
  }
  scenes_.push_back(std::move(rec));
  return scenes_.back();
}

bool FactorizedModel::has_scene(std::string_view id) const {
  for (const auto& s : scenes_)
    if (s.id == id) return true;
  return false;
}

std::size_t FactorizedModel::scene_index(std::string_view id) const {
  for (std::size_t i = 0; i < scenes_.size(); ++i)
    if (scenes_[i].id == id) return i;
  throw LookupError("unknown scene '" + std::string(id) + "'");
}

const SceneRecord& FactorizedModel::scene(std::string_view id) const { return scenes_[scene_index(id)]; }
SceneRecord& FactorizedModel::scene(std::string_view id) { return scenes_[scene_index(id)]; }

ParameterCount FactorizedModel::count_parameters() const {
  ParameterCount pc;
  const std::size_t L = config_.layers, K = config_.rank, Z = config_.noise_dim, H = config_.generator_hidden;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in = config_.in_dim(l), out = config_.out_dim(l);
    if (config_.use_generator) {
      pc.generator += Z * H + H + H * in * K + in * K;
      pc.per_scene += Z;
    } else {
      pc.per_scene += in * K;
    }
    if (config_.use_coefficients) pc.per_scene += K * K;
    pc.cswm += K * out;
    pc.encoder_bias += out;
  }
  const std::size_t dec_in = config_.width + config_.dir_dim();
  pc.decoder = dec_in * config_.decoder_hidden + config_.decoder_hidden + config_.decoder_hidden * 3 + 3;
  pc.uncertainty = 2;
  pc.scenes = scenes_.size();
  return pc;
}

std::size_t vanilla_parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < config.layers; ++l) n += (config.in_dim(l) + 1) * config.out_dim(l);
  const std::size_t dec_in = config.width + config.dir_dim();
  n += dec_in * config.decoder_hidden + config.decoder_hidden + config.decoder_hidden * 3 + 3;
  return n;
}

template <class Self, class Fn>
void FactorizedModel::visit(Self& self, Fn&& fn) {
  for (std::size_t l = 0; l < self.config_.layers; ++l) {
    const std::string ls = std::to_string(l);
    fn("cswm." + ls, self.cswm_[l]);
    fn("encoder_bias." + ls, self.encoder_bias_[l]);
    if (self.config_.use_generator) {
      auto& g = self.generators_[l];
      fn("generator." + ls + ".w1", g.w1);
      fn("generator." + ls + ".b1", g.b1);
      fn("generator." + ls + ".w2", g.w2);
      fn("generator." + ls + ".b2", g.b2);
    }
  }
  fn("decoder.w1", self.decoder_.w1);
  fn("decoder.b1", self.decoder_.b1);
  fn("decoder.w2", self.decoder_.w2);
  fn("decoder.b2", self.decoder_.b2);
  fn("log_beta1", self.log_beta1_);
  fn("log_beta2", self.log_beta2_);
  for (auto& s : self.scenes_) {
    for (std::size_t l = 0; l < s.coefficients.size(); ++l)
      fn("scene." + s.id + ".coeff." + std::to_string(l), s.coefficients[l]);
    for (std::size_t l = 0; l < s.direct_sswm.size(); ++l)
      fn("scene." + s.id + ".sswm." + std::to_string(l), s.direct_sswm[l]);
  }
}

void FactorizedModel::for_each_parameter(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit(*this, fn);
}

void FactorizedModel::for_each_parameter(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit(*this, fn);
}

void FactorizedModel::set_shared_trainable(bool on) {
  for (auto& t : cswm_) t.set_requires_grad(on);
  for (auto& t : encoder_bias_) t.set_requires_grad(on);
  for (auto& g : generators_)
    for (Tensor* t : {&g.w1, &g.b1, &g.w2, &g.b2}) t->set_requires_grad(on);
  for (Tensor* t : {&decoder_.w1, &decoder_.b1, &decoder_.w2, &decoder_.b2}) t->set_requires_grad(on);
}

void FactorizedModel::set_scene_trainable(std::string_view id, bool on) {
  SceneRecord& s = scene(id);
  for (auto& t : s.coefficients) t.set_requires_grad(on);
  for (auto& t : s.direct_sswm) t.set_requires_grad(on);
}

void FactorizedModel::set_uncertainty_trainable(bool on) {
  log_beta1_.set_requires_grad(on);
  log_beta2_.set_requires_grad(on);
}

void FactorizedModel::set_all_trainable(bool on) {
  for_each_parameter([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

void FactorizedModel::clear_grads() {
  for_each_parameter([](const std::string&, Tensor& t) { t.clear_grad(); });
}

void FactorizedModel::round_to_storage_precision() {
  for_each_parameter([](const std::string&, Tensor& t) { round_matrix(t.value()); });
  for (auto& s : scenes_)
    for (auto& z : s.noise) round_matrix(z);
}

SceneGraph bind_scene(Tape& tape, const FactorizedModel& model, std::string_view scene_id) {
  const ModelConfig& cfg = model.config();
  const SceneRecord& rec = model.scene(scene_id);
  SceneGraph g;
  g.config = &cfg;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerFactors f;
    if (cfg.use_generator) {
      const GeneratorWeights& gen = model.generators()[l];
      Var z = tape.constant_ref(rec.noise[l]);
      Var h = relu(add_row(matmul(z, tape.param(gen.w1)), tape.param(gen.b1)));
      Var flat = add_row(matmul(h, tape.param(gen.w2)), tape.param(gen.b2));
      f.sswm = reshape(flat, cfg.in_dim(l), cfg.rank);
    } else {
      f.sswm = tape.param(rec.direct_sswm[l]);
    }
    Var cm = tape.param(model.cswm()[l]);
    f.mixed = cfg.use_coefficients ? matmul(tape.param(rec.coefficients[l]), cm) : cm;
    g.layers.push_back(f);
    g.biases.push_back(tape.param(model.encoder_bias()[l]));
  }
  const DecoderWeights& dec = model.decoder();
  g.dec_w1 = tape.param(dec.w1);
  g.dec_b1 = tape.param(dec.b1);
  g.dec_w2 = tape.param(dec.w2);
  g.dec_b2 = tape.param(dec.b2);
  return g;
}

SceneGraph detach_onto(Tape& tape, const SceneGraph& graph) {
  SceneGraph out = graph;
  for (auto& layer : out.layers) {
    layer.sswm = tape.constant_ref(layer.sswm.value());
    layer.mixed = tape.constant_ref(layer.mixed.value());
  }
  for (auto& bias : out.biases) bias = tape.constant_ref(bias.value());
  for (Var* v : {&out.dec_w1, &out.dec_b1, &out.dec_w2, &out.dec_b2}) *v = tape.constant_ref(v->value());
  return out;
}

namespace {

Var encoder_output(Tape& tape, const SceneGraph& graph, const Matrix& positions) {
  const ModelConfig& cfg = *graph.config;
  if (positions.cols() != 3) throw DimensionError("positions must be M x 3, got " + shape_string(positions));
  Var x = tape.constant(positional_encode_rows(positions, cfg.pos_degrees));
  Var h = x;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (l > 0 && l + 1 == cfg.skip_layer) h = concat_cols(h, x);
    // Low-rank product: (h * SSWM) * (C * CM) never forms E explicitly.
    h = add_row(matmul(matmul(h, graph.layers[l].sswm), graph.layers[l].mixed), graph.biases[l]);
    if (l + 1 < cfg.layers) h = relu(h);
  }
  return h;
}

}  // namespace

Var query_density(Tape& tape, const SceneGraph& graph, const Matrix& positions) {
  return relu(slice_cols(encoder_output(tape, graph, positions), 0, 1));
}

FieldVars query_field(Tape& tape, const SceneGraph& graph, const Matrix& positions, const Matrix& directions) {
  const ModelConfig& cfg = *graph.config;
  if (directions.cols() != 3 || directions.rows() != positions.rows())
    throw DimensionError("directions " + shape_string(directions) + " do not match positions " +
                         shape_string(positions));
  Var h = encoder_output(tape, graph, positions);
  FieldVars out;
  out.sigma = relu(slice_cols(h, 0, 1));
  Var feature = slice_cols(h, 1, cfg.width + 1);
  Var dec_in = concat_cols(feature, tape.constant(positional_encode_rows(directions, cfg.dir_degrees)));
  Var hidden = relu(add_row(matmul(dec_in, graph.dec_w1), graph.dec_b1));
  out.rgb = sigmoid(add_row(matmul(hidden, graph.dec_w2), graph.dec_b2));
  return out;
}

Matrix generate_scene_weights(const FactorizedModel& model, std::string_view scene_id, std::size_t layer) {
  if (layer >= model.config().layers)
    throw LookupError("layer " + std::to_string(layer) + " out of range for " +
                      std::to_string(model.config().layers) + " encoder layers");
  Tape tape(false);
  SceneGraph g = bind_scene(tape, model, scene_id);
  return matmul(g.layers[layer].sswm.value(), g.layers[layer].mixed.value());
}

FieldSample forward(const FactorizedModel& model, std::string_view scene_id, const Vec3& x, const Vec3& d) {
  if (std::abs(d.norm() - 1.0) > 1e-6) throw ContractError("view direction must be unit length");
  Tape tape(false);
  SceneGraph g = bind_scene(tape, model, scene_id);
  Matrix pos = Matrix::from_rows({{x.x, x.y, x.z}});
  Matrix dir = Matrix::from_rows({{d.x, d.y, d.z}});
  FieldVars f = query_field(tape, g, pos, dir);
  const Matrix& c = f.rgb.value();
  return {f.sigma.value()[0], {c[0], c[1], c[2]}};
}

std::size_t MaterializedMlp::parameter_count() const {
  std::size_t n = dec_w1.size() + dec_b1.size() + dec_w2.size() + dec_b2.size();
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

namespace {

void add_bias_inplace(Matrix& m, const Matrix& b) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double* row = m.data() + r * m.cols();
    for (std::size_t j = 0; j < m.cols(); ++j) row[j] += b[j];
  }
}

void relu_inplace(Matrix& m) {
  for (double& v : m.values()) v = v > 0.0 ? v : 0.0;
}

}  // namespace

std::pair<Matrix, Matrix> MaterializedMlp::query(const Matrix& positions, const Matrix& directions) const {
  const Matrix x = positional_encode_rows(positions, config.pos_degrees);
  Matrix h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (l > 0 && l + 1 == config.skip_layer) {
      Matrix cat(h.rows(), h.cols() + x.cols());
      for (std::size_t r = 0; r < h.rows(); ++r) {
        std::copy(h.row(r).begin(), h.row(r).end(), cat.row(r).begin());
        std::copy(x.row(r).begin(), x.row(r).end(), cat.row(r).begin() + h.cols());
      }
      h = std::move(cat);
    }
    Matrix next = scarf::matmul(h, weights[l]);
    add_bias_inplace(next, biases[l]);
    if (l + 1 < weights.size()) relu_inplace(next);
    h = std::move(next);
  }
  const Matrix d = positional_encode_rows(directions, config.dir_degrees);
  Matrix sigma(h.rows(), 1);
  Matrix dec_in(h.rows(), config.width + d.cols());
  for (std::size_t r = 0; r < h.rows(); ++r) {
    sigma(r, 0) = h(r, 0) > 0.0 ? h(r, 0) : 0.0;
    std::copy(h.row(r).begin() + 1, h.row(r).end(), dec_in.row(r).begin());
    std::copy(d.row(r).begin(), d.row(r).end(), dec_in.row(r).begin() + config.width);
  }
  Matrix hidden = scarf::matmul(dec_in, dec_w1);
  add_bias_inplace(hidden, dec_b1);
  relu_inplace(hidden);
  Matrix rgb = scarf::matmul(hidden, dec_w2);
  add_bias_inplace(rgb, dec_b2);
  for (double& v : rgb.values()) v = 1.0 / (1.0 + std::exp(-v));
  return {std::move(sigma), std::move(rgb)};
}

MaterializedMlp materialize(const FactorizedModel& model, std::string_view scene_id) {
  MaterializedMlp mlp;
  mlp.config = model.config();
  for (std::size_t l = 0; l < model.config().layers; ++l) {
    mlp.weights.push_back(generate_scene_weights(model, scene_id, l));
    mlp.biases.push_back(model.encoder_bias()[l].value());
  }
  mlp.dec_w1 = model.decoder().w1.value();
  mlp.dec_b1 = model.decoder().b1.value();
  mlp.dec_w2 = model.decoder().w2.value();
  mlp.dec_b2 = model.decoder().b2.value();
  return mlp;
}

}  // namespace scarf
