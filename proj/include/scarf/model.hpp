#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "scarf/camera.hpp"
#include "scarf/prng.hpp"
#include "scarf/tape.hpp"
#include "scarf/tensor.hpp"

namespace scarf {

/// Architecture of the factorized multi-scene field. Layer indices in the
/// C++ API are 0-based; `skip_layer` keeps the 1-based count used in configs
/// (5 means the fifth encoder layer receives the re-injected input encoding).
struct ModelConfig {
  std::size_t layers = 9;  // encoder layers L
  std::size_t width = 256;
  std::size_t rank = 21;  // K
  std::size_t noise_dim = 16;  // Z
  std::size_t pos_degrees = 10;
  std::size_t dir_degrees = 4;
  std::size_t skip_layer = 5;
  std::size_t decoder_hidden = 128;
  std::size_t generator_hidden = 64;
  // Ablation switches. Without the generator each scene owns its SSWMs
  // directly; without coefficients C is fixed to the identity.
  bool use_generator = true;
  bool use_coefficients = true;

  static ModelConfig paper();
  /// Small CPU configuration: L=4, c=64, K=8, Z=8.
  static ModelConfig desk();

  /// Throws ContractError naming the offending field.
  void validate() const;

  std::size_t pos_dim() const { return 3 * (1 + 2 * pos_degrees); }
  std::size_t dir_dim() const { return 3 * (1 + 2 * dir_degrees); }
  std::size_t in_dim(std::size_t layer) const;
  std::size_t out_dim(std::size_t layer) const;
  bool operator==(const ModelConfig&) const = default;
};

/// [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(n-1) pi p), cos(2^(n-1) pi p)]
std::vector<double> positional_encode(std::span<const double> p, std::size_t degrees);
/// Row-wise encoding of an M x 3 matrix.
Matrix positional_encode_rows(const Matrix& points, std::size_t degrees);

struct GeneratorWeights {
  Tensor w1, b1;  // Z -> hidden
  Tensor w2, b2;  // hidden -> in_dim * K
};

struct DecoderWeights {
  Tensor w1, b1;  // c + dir_dim -> hidden
  Tensor w2, b2;  // hidden -> 3
};

/// Poses and intrinsics of a scene's training views; no pixels.
struct SceneFrusta {
  std::vector<Camera> views;
  double near = 2.0;
  double far = 6.0;
  bool white_background = true;
  bool operator==(const SceneFrusta&) const = default;
};

struct SceneRecord {
  std::string id;
  std::string source;  // where the training data came from, informational
  std::vector<Matrix> noise;  // L vectors, 1 x Z, frozen
  std::vector<Tensor> coefficients;  // L matrices, K x K
  std::vector<Tensor> direct_sswm;  // only without the generator: in_dim x K
  SceneFrusta frusta;
};

struct ParameterCount {
  std::size_t per_scene = 0;  // one scene's stored scalars
  std::size_t scenes = 0;
  std::size_t generator = 0;
  std::size_t cswm = 0;
  std::size_t encoder_bias = 0;
  std::size_t decoder = 0;
  std::size_t uncertainty = 0;

  std::size_t shared() const { return generator + cswm + encoder_bias + decoder + uncertainty; }
  std::size_t per_scene_total() const { return per_scene * scenes; }
  std::size_t total() const { return shared() + per_scene_total(); }
};

/// Shared cross-scene weights, per-layer generators, global decoder and the
/// ordered list of learned scenes. Value semantics: copying deep-copies.
class FactorizedModel {
 public:
  FactorizedModel(const ModelConfig& config, Prng& prng);

  const ModelConfig& config() const { return config_; }

  const std::vector<Tensor>& cswm() const { return cswm_; }
  const std::vector<Tensor>& encoder_bias() const { return encoder_bias_; }
  const std::vector<GeneratorWeights>& generators() const { return generators_; }
  const DecoderWeights& decoder() const { return decoder_; }
  const Tensor& log_beta1() const { return log_beta1_; }
  const Tensor& log_beta2() const { return log_beta2_; }
  double beta1() const;
  double beta2() const;

  /// Draws z ~ N(0, 1) and C = I + N(0, 0.01); shared weights are untouched.
  const SceneRecord& add_scene(std::string id, SceneFrusta frusta, Prng& prng, std::string source = {});
  bool has_scene(std::string_view id) const;
  const SceneRecord& scene(std::string_view id) const;
  SceneRecord& scene(std::string_view id);
  const std::vector<SceneRecord>& scenes() const { return scenes_; }
  std::size_t scene_index(std::string_view id) const;

  ParameterCount count_parameters() const;

  /// Visits every stored tensor with a stable dotted name. Scene noise is
  /// not a Tensor and is not visited.
  void for_each_parameter(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_parameter(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  void set_shared_trainable(bool on);
  void set_scene_trainable(std::string_view id, bool on);
  void set_uncertainty_trainable(bool on);
  void set_all_trainable(bool on);
  void clear_grads();

  /// Rounds every stored scalar to 32-bit precision so the in-memory model
  /// equals what the model file holds.
  void round_to_storage_precision();

  // Direct access for deserialization and tests.
  std::vector<Tensor>& mutable_cswm() { return cswm_; }
  std::vector<Tensor>& mutable_encoder_bias() { return encoder_bias_; }
  std::vector<GeneratorWeights>& mutable_generators() { return generators_; }
  DecoderWeights& mutable_decoder() { return decoder_; }
  Tensor& mutable_log_beta1() { return log_beta1_; }
  Tensor& mutable_log_beta2() { return log_beta2_; }
  std::vector<SceneRecord>& mutable_scenes() { return scenes_; }

 private:
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn);

  ModelConfig config_;
  std::vector<Tensor> cswm_;  // K x out_dim(l)
  std::vector<Tensor> encoder_bias_;  // 1 x out_dim(l), shared across scenes
  std::vector<GeneratorWeights> generators_;
  DecoderWeights decoder_;
  Tensor log_beta1_;
  Tensor log_beta2_;
  std::vector<SceneRecord> scenes_;
};

std::size_t vanilla_parameter_count(const ModelConfig& config);

// Tape-level forward pass.

/// Encoder weight of one layer as the product sswm * mixed, where
/// sswm = G(z) (in_dim x K) and mixed = C * CM (K x out_dim).
struct LayerFactors {
  Var sswm;
  Var mixed;
};

struct SceneGraph {
  const ModelConfig* config = nullptr;
  std::vector<LayerFactors> layers;
  std::vector<Var> biases;
  Var dec_w1, dec_b1, dec_w2, dec_b2;
};

struct FieldVars {
  Var sigma;  // M x 1, >= 0
  Var rgb;  // M x 3, in [0, 1]
};

/// Binds one scene's generated encoder and the shared decoder onto `tape`.
SceneGraph bind_scene(Tape& tape, const FactorizedModel& model, std::string_view scene_id);

/// Copies the bound values of `graph` onto `tape` as constants.
SceneGraph detach_onto(Tape& tape, const SceneGraph& graph);

/// Evaluates the field at M points with unit directions (both M x 3).
FieldVars query_field(Tape& tape, const SceneGraph& graph, const Matrix& positions, const Matrix& directions);
/// Density only; skips the decoder.
Var query_density(Tape& tape, const SceneGraph& graph, const Matrix& positions);

/// E_l = G_l(z_l) * (C_l * CM_l), in_dim x out_dim.
Matrix generate_scene_weights(const FactorizedModel& model, std::string_view scene_id, std::size_t layer);

struct FieldSample {
  double sigma = 0.0;
  Vec3 rgb;
};

/// Single query; d must be unit length within 1e-6.
FieldSample forward(const FactorizedModel& model, std::string_view scene_id, const Vec3& x, const Vec3& d);

/// Plain MLP with pre-generated encoder weights.
struct MaterializedMlp {
  ModelConfig config;
  std::vector<Matrix> weights;  // in_dim x out_dim
  std::vector<Matrix> biases;
  Matrix dec_w1, dec_b1, dec_w2, dec_b2;

  std::size_t parameter_count() const;
  /// Returns sigma (M x 1) and rgb (M x 3).
  std::pair<Matrix, Matrix> query(const Matrix& positions, const Matrix& directions) const;
};

MaterializedMlp materialize(const FactorizedModel& model, std::string_view scene_id);

}  // namespace scarf
