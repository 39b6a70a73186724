#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <numbers>

#include "scarf/errors.hpp"
#include "scarf/model.hpp"
#include "support.hpp"

using namespace scarf;
using scarf::test::random_matrix;
using scarf::test::tiny_config;

namespace {

std::size_t svd_rank(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues();
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) rank += s(i) > 1e-9 * s(0);
  return rank;
}

Matrix unit_directions(std::size_t n, Prng& prng) {
  Matrix d(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 v = Vec3{prng.normal(), prng.normal(), prng.normal()}.normalized();
    d(i, 0) = v.x;
    d(i, 1) = v.y;
    d(i, 2) = v.z;
  }
  return d;
}

// Byte image of every shared tensor, for isolation checks.
std::vector<double> shared_values(const FactorizedModel& m) {
  std::vector<double> out;
  m.for_each_parameter([&](const std::string& name, const Tensor& t) {
    if (name.rfind("scene.", 0) != 0) out.insert(out.end(), t.value().values().begin(), t.value().values().end());
  });
  return out;
}

// Generator scalars written out layer by layer.
std::size_t generator_params(const ModelConfig& c) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::size_t in = l == 0 ? 3 + 6 * c.pos_degrees
                                  : (l + 1 == c.skip_layer ? c.width + 3 + 6 * c.pos_degrees : c.width);
    n += c.noise_dim * c.generator_hidden + c.generator_hidden + c.generator_hidden * in * c.rank + in * c.rank;
  }
  return n;
}

}  // namespace

TEST_CASE("positional encoding examples") {
  const double zero[] = {0.0};
  CHECK(positional_encode(zero, 2) == std::vector<double>{0, 0, 1, 0, 1});
  const double x[] = {0.37};
  CHECK(positional_encode(x, 0) == std::vector<double>{0.37});
  const double half[] = {0.5};
  const auto e = positional_encode(half, 1);
  REQUIRE(e.size() == 3);
  CHECK(e[0] == 0.5);
  CHECK(e[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(e[2]) < 1e-15);
  const double p[] = {0.1, -0.2, 0.3};
  const auto ep = positional_encode(p, 10);
  CHECK(ep.size() == 63);
  CHECK(ep[3 + 6 * 9 + 2] == doctest::Approx(std::sin(512 * std::numbers::pi * 0.3)));
  CHECK(ep[3 + 6 * 9 + 3] == doctest::Approx(std::cos(512 * std::numbers::pi * 0.1)));
}

TEST_CASE("config dimensions and validation") {
  const ModelConfig paper = ModelConfig::paper();
  CHECK(paper.layers == 9);
  CHECK(paper.rank == 21);
  CHECK(paper.noise_dim == 16);
  CHECK(paper.in_dim(0) == 63);
  CHECK(paper.in_dim(4) == 256 + 63);
  CHECK(paper.in_dim(5) == 256);
  CHECK(paper.out_dim(8) == 257);
  CHECK(paper.dir_dim() == 27);
  const ModelConfig desk = ModelConfig::desk();
  CHECK(desk.layers == 4);
  CHECK(desk.width == 64);
  CHECK(desk.rank == 8);
  CHECK(desk.noise_dim == 8);
  auto broken = [](auto edit) {
    ModelConfig c = ModelConfig::desk();
    edit(c);
    return c;
  };
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.rank = 0; }).validate(), ContractError);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.layers = 1; }).validate(), ContractError);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.noise_dim = 0; }).validate(), ContractError);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.skip_layer = 4; }).validate(), ContractError);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.skip_layer = 1; }).validate(), ContractError);
}

TEST_CASE("parameter counts follow the per-layer accounting") {
  const ModelConfig c = ModelConfig::paper();
  Prng prng(1);
  FactorizedModel model(c, prng);
  const ParameterCount pc0 = model.count_parameters();
  CHECK(pc0.per_scene_total() == 0);
  CHECK(pc0.per_scene == 9 * (16 + 21 * 21));
  CHECK(pc0.per_scene == 4113);
  CHECK(pc0.generator == generator_params(c));
  std::size_t cswm = 0, bias = 0;
  for (std::size_t l = 0; l < c.layers; ++l) {
    cswm += c.rank * (l + 1 == c.layers ? c.width + 1 : c.width);
    bias += l + 1 == c.layers ? c.width + 1 : c.width;
  }
  CHECK(pc0.cswm == cswm);
  CHECK(pc0.encoder_bias == bias);
  CHECK(pc0.decoder == (256 + 27) * 128 + 128 + 128 * 3 + 3);

  // Independent count straight from the stored tensors.
  std::size_t stored = 0;
  model.for_each_parameter([&](const std::string&, const Tensor& t) { stored += t.size(); });
  CHECK(stored == pc0.shared());

  model.add_scene("a", SceneFrusta{}, prng);
  const ParameterCount pc1 = model.count_parameters();
  CHECK(pc1.total() - pc0.total() == 4113);
  std::size_t scene_scalars = 0;
  for (const Matrix& z : model.scene("a").noise) scene_scalars += z.size();
  for (const Tensor& t : model.scene("a").coefficients) scene_scalars += t.size();
  CHECK(scene_scalars == 4113);
  for (int i = 0; i < 7; ++i) model.add_scene("s" + std::to_string(i), SceneFrusta{}, prng);
  CHECK(model.count_parameters().shared() == pc1.shared());
  CHECK(model.count_parameters().total() == pc1.shared() + 8 * 4113);
  // 32-bit storage of one scene is on the order of 0.01 MB.
  const double mb = 4113 * 4 / 1e6;
  CHECK(mb > 0.005);
  CHECK(mb < 0.05);
}

TEST_CASE("ablation configs change only the per-scene inventory") {
  ModelConfig c = tiny_config();
  c.use_generator = false;
  Prng prng(2);
  FactorizedModel direct(c, prng);
  direct.add_scene("a", SceneFrusta{}, prng);
  std::size_t expect = 0;
  for (std::size_t l = 0; l < c.layers; ++l) expect += c.in_dim(l) * c.rank + c.rank * c.rank;
  CHECK(direct.count_parameters().per_scene == expect);
  CHECK(direct.count_parameters().generator == 0);
  c.use_generator = true;
  c.use_coefficients = false;
  FactorizedModel no_coeff(c, prng);
  no_coeff.add_scene("a", SceneFrusta{}, prng);
  CHECK(no_coeff.count_parameters().per_scene == c.layers * c.noise_dim);
  CHECK(no_coeff.scene("a").coefficients.empty());
}

TEST_CASE("add_scene leaves shared weights untouched and rejects duplicates") {
  Prng prng(3);
  FactorizedModel model(tiny_config(), prng);
  const auto before = shared_values(model);
  const SceneRecord& rec = model.add_scene("a", SceneFrusta{}, prng);
  CHECK(rec.noise.size() == 3);
  CHECK(rec.coefficients.size() == 3);
  CHECK(shared_values(model) == before);
  CHECK_THROWS_AS(model.add_scene("a", SceneFrusta{}, prng), ConflictError);
  CHECK_THROWS_AS(model.scene("missing"), LookupError);
  CHECK_THROWS_AS(generate_scene_weights(model, "missing", 0), LookupError);
}

TEST_CASE("identity coefficients reduce to G(z) * CM") {
  Prng prng(4);
  FactorizedModel model(tiny_config(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  for (std::size_t l = 0; l < 3; ++l) {
    Tensor& c = model.scene("a").coefficients[l];
    c.value() = Matrix::identity(2);
    const Matrix e = generate_scene_weights(model, "a", l);
    // G(z) computed by hand from the generator weights.
    const GeneratorWeights& g = model.generators()[l];
    Matrix h = matmul(model.scene("a").noise[l], g.w1.value());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(0.0, h[i] + g.b1.value()[i]);
    Matrix flat = matmul(h, g.w2.value());
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += g.b2.value()[i];
    const Matrix sm = flat.reshaped(model.config().in_dim(l), 2);
    const Matrix expect = matmul(sm, model.cswm()[l].value());
    REQUIRE(e.rows() == expect.rows());
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(std::abs(e[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("generated weights have rank at most K") {
  SUBCASE("desk config, several scenes") {
    Prng prng(5);
    FactorizedModel model(ModelConfig::desk(), prng);
    for (const char* id : {"a", "b", "c"}) model.add_scene(id, SceneFrusta{}, prng);
    for (const char* id : {"a", "b", "c"})
      for (std::size_t l = 0; l < 4; ++l) CHECK(svd_rank(generate_scene_weights(model, id, l)) <= 8);
  }
  SUBCASE("K = 1 gives an outer product") {
    ModelConfig c = tiny_config();
    c.rank = 1;
    Prng prng(6);
    FactorizedModel model(c, prng);
    model.add_scene("a", SceneFrusta{}, prng);
    for (std::size_t l = 0; l < 3; ++l) CHECK(svd_rank(generate_scene_weights(model, "a", l)) == 1);
  }
}

TEST_CASE("different noise gives different weights") {
  Prng prng(7);
  FactorizedModel model(ModelConfig::desk(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  model.add_scene("b", SceneFrusta{}, prng);
  for (std::size_t l = 0; l < 4; ++l) {
    const Matrix a = generate_scene_weights(model, "a", l), b = generate_scene_weights(model, "b", l);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    CHECK(diff > 0.0);
    CHECK(generate_scene_weights(model, "a", l) == a);
  }
}

TEST_CASE("materialized MLP agrees with the factorized path") {
  Prng prng(8);
  FactorizedModel model(ModelConfig::desk(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  const MaterializedMlp mlp = materialize(model, "a");
  CHECK(mlp.parameter_count() == vanilla_parameter_count(model.config()));
  const MaterializedMlp again = materialize(model, "a");
  CHECK(again.weights == mlp.weights);
  CHECK(again.dec_w1 == mlp.dec_w1);
  const Matrix pos = random_matrix(100, 3, prng, -1.5, 1.5), dirs = unit_directions(100, prng);
  const auto [sigma, rgb] = mlp.query(pos, dirs);
  Tape tape(false);
  const SceneGraph g = bind_scene(tape, model, "a");
  const FieldVars f = query_field(tape, g, pos, dirs);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(std::abs(sigma[i] - f.sigma.value()[i]) < 1e-12);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(rgb(i, c) - f.rgb.value()(i, c)) < 1e-12);
  }
}

TEST_CASE("vanilla count matches the fully connected formula") {
  const ModelConfig c = ModelConfig::paper();
  std::size_t n = 0;
  for (std::size_t l = 0; l < c.layers; ++l) n += (c.in_dim(l) + 1) * c.out_dim(l);
  n += (256 + 27) * 128 + 128 + 128 * 3 + 3;
  CHECK(vanilla_parameter_count(c) == n);
}

TEST_CASE("forward range, determinism and direction check") {
  Prng prng(9);
  FactorizedModel model(ModelConfig::desk(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 x{prng.uniform(-3, 3), prng.uniform(-3, 3), prng.uniform(-3, 3)};
    const Vec3 d = Vec3{prng.normal(), prng.normal(), prng.normal()}.normalized();
    const FieldSample s = forward(model, "a", x, d);
    REQUIRE(std::isfinite(s.sigma));
    CHECK(s.sigma >= 0.0);
    for (int c = 0; c < 3; ++c) {
      CHECK(s.rgb[c] >= 0.0);
      CHECK(s.rgb[c] <= 1.0);
    }
    const FieldSample again = forward(model, "a", x, d);
    CHECK(again.sigma == s.sigma);
    CHECK(again.rgb == s.rgb);
  }
  CHECK_THROWS_AS(forward(model, "a", {0, 0, 0}, {0, 0, 1.01}), ContractError);
}

TEST_CASE("density gradient with respect to the cross-scene matrix") {
  Prng prng(10);
  FactorizedModel model(tiny_config(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  // Raise the density bias so relu(sigma) is active at the probe points.
  model.mutable_encoder_bias()[2].value()[0] = 2.0;
  const Matrix pos = random_matrix(4, 3, prng, -1, 1);
  const auto loss = [&](Tape& tape, const FactorizedModel& m) {
    const SceneGraph g = bind_scene(tape, m, "a");
    return sum(query_density(tape, g, pos));
  };
  for (const char* name : {"cswm.0", "cswm.1", "cswm.2", "scene.a.coeff.1", "generator.0.w2"}) {
    CAPTURE(name);
    const auto [worst, n] = test::model_gradient_error(model, loss, [&](const std::string& s) { return s == name; });
    CHECK(n > 0);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("every reachable trainable scalar receives a gradient") {
  Prng prng(11);
  FactorizedModel model(tiny_config(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  model.add_scene("b", SceneFrusta{}, prng);
  model.mutable_encoder_bias()[2].value()[0] = 2.0;
  {
    Tape tape;
    const SceneGraph g = bind_scene(tape, model, "a");
    const FieldVars f = query_field(tape, g, random_matrix(16, 3, prng, -1, 1), unit_directions(16, prng));
    tape.backward(add(sum(f.sigma), sum(f.rgb)));
  }
  model.for_each_parameter([&](const std::string& name, const Tensor& t) {
    CAPTURE(name);
    if (name.rfind("log_beta", 0) == 0 || name.rfind("scene.b.", 0) == 0) {
      CHECK_FALSE(t.has_grad());
      return;
    }
    REQUIRE(t.has_grad());
    CHECK(t.grad().max_abs() > 0.0);
  });
}

TEST_CASE("changing one scene leaves the others bit-identical") {
  Prng prng(12);
  FactorizedModel model(ModelConfig::desk(), prng);
  model.add_scene("s", SceneFrusta{}, prng);
  model.add_scene("t", SceneFrusta{}, prng);
  const Matrix pos = random_matrix(64, 3, prng, -1.5, 1.5), dirs = unit_directions(64, prng);
  auto query = [&](const char* id) {
    Tape tape(false);
    const FieldVars f = query_field(tape, bind_scene(tape, model, id), pos, dirs);
    return std::pair{f.sigma.value(), f.rgb.value()};
  };
  const auto s_before = query("s"), t_before = query("t");
  for (Tensor& c : model.scene("t").coefficients)
    for (double& v : c.value().values()) v += 0.3;
  CHECK(query("s") == s_before);
  CHECK(query("t") != t_before);
}

TEST_CASE("storage rounding is idempotent and exact to float") {
  Prng prng(13);
  FactorizedModel model(tiny_config(), prng);
  model.add_scene("a", SceneFrusta{}, prng);
  model.mutable_cswm()[0].value()[0] = 0.1;
  model.round_to_storage_precision();
  CHECK(model.cswm()[0].value()[0] == static_cast<double>(0.1f));
  model.for_each_parameter([](const std::string&, const Tensor& t) {
    for (double v : t.value().values()) CHECK(v == static_cast<double>(static_cast<float>(v)));
  });
}

TEST_CASE("beta is stored in the log domain and starts at 0.045 and 0.06") {
  Prng prng(14);
  FactorizedModel model(tiny_config(), prng);
  CHECK(model.beta1() == doctest::Approx(0.045).epsilon(1e-6));
  CHECK(model.beta2() == doctest::Approx(0.06).epsilon(1e-6));
  model.mutable_log_beta1().value()[0] = -50.0;
  CHECK(model.beta1() > 0.0);
}
