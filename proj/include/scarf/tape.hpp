#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "scarf/tensor.hpp"

namespace scarf {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Convenience for 1 x 1 values.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// What a recorded operation sees when its adjoint is propagated.
/// input_grads[i] is null when input i does not need a gradient.
struct BackwardContext {
  const Matrix& output;
  const Matrix& output_grad;
  std::span<const Matrix* const> inputs;
  std::span<Matrix* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Wengert list for reverse-mode differentiation. Creation order is a
/// topological order, so backward() walks the list once in reverse.
/// A tape built with record_grads = false only evaluates values.
class Tape {
 public:
  explicit Tape(bool record_grads = true) : record_grads_(record_grads) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Borrows `value`; it must outlive the tape.
  Var constant_ref(const Matrix& value);
  /// Leaf bound to a parameter. Gradients flow back into `t` when
  /// t.requires_grad() and the tape records gradients.
  Var param(const Tensor& t);

  /// Records a primitive. `backward` may be empty when nothing needs a gradient.
  Var record(std::span<const Var> inputs, Matrix value, BackwardFn backward);

  bool needs_grad(Var v) const;
  bool records_grads() const { return record_grads_; }
  const Matrix& value(Var v) const;
  /// Adjoint of an intermediate after backward(), or null if none reached it.
  const Matrix* grad(Var v) const;

  /// Propagates d(loss)/d(.) to every node and accumulates into leaf tensors.
  /// The loss must be 1 x 1. A tape can be consumed only once.
  void backward(Var loss);
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* borrowed = nullptr;
    const Tensor* leaf = nullptr;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Matrix grad;

    const Matrix& value() const { return borrowed ? *borrowed : owned; }
  };

  void check_owner(Var v) const;

  std::deque<Node> nodes_;
  bool record_grads_ = true;
  bool consumed_ = false;
};

// Differentiable primitives. Binary elementwise ops accept equal shapes or a
// 1 x 1 operand on either side; nothing else broadcasts.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var square(Var a);
Var exp(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

/// x (n x m) + bias (1 x m) broadcast over rows.
Var add_row(Var x, Var bias);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var sum(Var a);
Var mean(Var a);

}  // namespace scarf
