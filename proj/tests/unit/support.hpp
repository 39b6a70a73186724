#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "scarf/model.hpp"
#include "scarf/prng.hpp"
#include "scarf/tape.hpp"
#include "scarf/tensor.hpp"

namespace scarf::test {

inline Matrix random_matrix(std::size_t r, std::size_t c, Prng& prng, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = prng.uniform(lo, hi);
  return m;
}

/// Keeps values away from a kink at zero so central differences stay on one side.
inline Matrix away_from_zero(Matrix m, double gap = 0.05) {
  for (double& v : m.values())
    if (std::abs(v) < gap) v = v < 0 ? -gap : gap;
  return m;
}

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
/// entry of every input, with central differences of step h.
inline double max_gradient_error(std::vector<Tensor>& inputs, const ScalarFn& f, double h = 1e-5,
                                 double floor = 1e-3) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.param(t));
    tape.backward(f(tape, vars));
  }
  auto eval = [&] {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.param(t));
    return f(tape, vars).item();
  };
  double worst = 0.0;
  for (Tensor& t : inputs) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t.value()[i];
      t.value()[i] = keep + h;
      const double up = eval();
      t.value()[i] = keep - h;
      const double down = eval();
      t.value()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

/// Small enough that every parameter can be perturbed one at a time.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 3;
  c.width = 8;
  c.rank = 2;
  c.noise_dim = 3;
  c.pos_degrees = 2;
  c.dir_degrees = 1;
  c.skip_layer = 2;
  c.decoder_hidden = 6;
  c.generator_hidden = 5;
  return c;
}

using ModelLossFn = std::function<Var(Tape&, const FactorizedModel&)>;

/// Central-difference check of every trainable model scalar whose name
/// passes `select`. Returns the worst relative error and the number checked.
inline std::pair<double, std::size_t> model_gradient_error(FactorizedModel& model, const ModelLossFn& loss,
                                                           const std::function<bool(const std::string&)>& select,
                                                           double h = 1e-6, double floor = 1e-4) {
  model.clear_grads();
  {
    Tape tape;
    tape.backward(loss(tape, model));
  }
  auto eval = [&] {
    Tape tape(false);
    return loss(tape, model).item();
  };
  double worst = 0.0;
  std::size_t checked = 0;
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    if (!t.requires_grad() || !select(name)) return;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t.value()[i];
      t.value()[i] = keep + h;
      const double up = eval();
      t.value()[i] = keep - h;
      const double down = eval();
      t.value()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor}));
      ++checked;
    }
  });
  model.clear_grads();
  return {worst, checked};
}

}  // namespace scarf::test
