#include "scarf/tape.hpp"

#include <malloc.h>

#include <cmath>

#include "scarf/errors.hpp"

namespace scarf {

namespace {

// Every training step frees and reallocates the same multi-megabyte buffers.
// Served by mmap, each one costs fresh page faults; keeping them on the heap
// lets the pages be reused.
[[maybe_unused]] const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1024 << 20);
  return true;
}();

}  // namespace

const Matrix& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

double Var::item() const {
  const Matrix& v = value();
  if (!v.is_scalar()) throw ContractError("item() on non-scalar " + shape_string(v));
  return v[0];
}

void Tape::check_owner(Var v) const {
  if (v.tape() != this || v.index() >= nodes_.size()) throw ContractError("Var does not belong to this tape");
}

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Tensor& t) {
  Node n;
  n.borrowed = &t.value();
  n.leaf = &t;
  n.needs_grad = record_grads_ && t.requires_grad();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(std::span<const Var> inputs, Matrix value, BackwardFn backward) {
  if (consumed_) throw ContractError("tape already consumed by backward()");
  Node n;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owner(v);
    n.inputs.push_back(v.index());
    n.needs_grad = n.needs_grad || nodes_[v.index()].needs_grad;
  }
  n.needs_grad = n.needs_grad && record_grads_;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

bool Tape::needs_grad(Var v) const {
  check_owner(v);
  return nodes_[v.index()].needs_grad;
}

const Matrix& Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.index()].value();
}

const Matrix* Tape::grad(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.index()];
  return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (consumed_) throw ContractError("backward() called twice on the same tape");
  if (!record_grads_) throw ContractError("backward() on a tape that does not record gradients");
  const Matrix& lv = nodes_[loss.index()].value();
  if (!lv.is_scalar()) throw ContractError("backward() needs a scalar loss, got " + shape_string(lv));
  consumed_ = true;

  nodes_[loss.index()].grad = Matrix(1, 1, 1.0);
  std::vector<const Matrix*> in_values;
  std::vector<Matrix*> in_grads;
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.leaf) continue;
    if (!n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t idx : n.inputs) {
      Node& in = nodes_[idx];
      in_values.push_back(&in.value());
      if (in.needs_grad) {
        if (in.grad.empty()) in.grad = Matrix(in.value().rows(), in.value().cols());
        in_grads.push_back(&in.grad);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    n.backward(BackwardContext{n.value(), n.grad, in_values, in_grads});
  }

  for (Node& n : nodes_) {
    if (!n.leaf || !n.needs_grad) continue;
    if (n.grad.empty())
      n.leaf->ensure_grad();
    else
      n.leaf->accumulate_grad(n.grad);
  }
}

namespace {

enum class Bcast { kSame, kLeftScalar, kRightScalar };

Bcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kSame;
  if (a.is_scalar()) return Bcast::kLeftScalar;
  if (b.is_scalar()) return Bcast::kRightScalar;
  throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) +
                       " are not broadcast-compatible");
}

Tape* same_tape(Var a, Var b) {
  if (a.tape() != b.tape() || !a.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

// Adds g (output-shaped) into an input gradient that may be a broadcast scalar.
void reduce_into(Matrix* dst, const Matrix& g, double factor = 1.0) {
  if (!dst) return;
  if (dst->is_scalar() && !g.is_scalar()) {
    double s = 0.0;
    for (double v : g.values()) s += v;
    (*dst)[0] += factor * s;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += factor * g[i];
}

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Matrix zip(const Matrix& a, const Matrix& b, Bcast kind, F f) {
  const Matrix& shape = kind == Bcast::kLeftScalar ? b : a;
  Matrix out(shape.rows(), shape.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = kind == Bcast::kLeftScalar ? a[0] : a[i];
    const double y = kind == Bcast::kRightScalar ? b[0] : b[i];
    out[i] = f(x, y);
  }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape* t = same_tape(a, b);
  Matrix out = scarf::matmul(a.value(), b.value());
  const Var in[] = {a, b};
  return t->record(in, std::move(out), [](const BackwardContext& c) {
    const Matrix& av = *c.inputs[0];
    const Matrix& bv = *c.inputs[1];
    if (c.input_grads[0]) gemm(c.output_grad, bv.transposed(), *c.input_grads[0], true);
    if (c.input_grads[1]) gemm_tn_accumulate(av, c.output_grad, *c.input_grads[1]);
  });
}

Var add(Var a, Var b) {
  Tape* t = same_tape(a, b);
  const Bcast k = broadcast_kind(a.value(), b.value(), "add");
  const Var in[] = {a, b};
  return t->record(in, zip(a.value(), b.value(), k, [](double x, double y) { return x + y; }),
                   [](const BackwardContext& c) {
                     reduce_into(c.input_grads[0], c.output_grad);
                     reduce_into(c.input_grads[1], c.output_grad);
                   });
}

Var sub(Var a, Var b) {
  Tape* t = same_tape(a, b);
  const Bcast k = broadcast_kind(a.value(), b.value(), "sub");
  const Var in[] = {a, b};
  return t->record(in, zip(a.value(), b.value(), k, [](double x, double y) { return x - y; }),
                   [](const BackwardContext& c) {
                     reduce_into(c.input_grads[0], c.output_grad);
                     reduce_into(c.input_grads[1], c.output_grad, -1.0);
                   });
}

Var mul(Var a, Var b) {
  Tape* t = same_tape(a, b);
  const Bcast k = broadcast_kind(a.value(), b.value(), "mul");
  const Var in[] = {a, b};
  return t->record(in, zip(a.value(), b.value(), k, [](double x, double y) { return x * y; }),
                   [k](const BackwardContext& c) {
                     const Matrix& av = *c.inputs[0];
                     const Matrix& bv = *c.inputs[1];
                     const Matrix& g = c.output_grad;
                     if (c.input_grads[0]) {
                       Matrix ga = zip(g, bv, k == Bcast::kRightScalar ? Bcast::kRightScalar : Bcast::kSame,
                                       [](double x, double y) { return x * y; });
                       reduce_into(c.input_grads[0], ga);
                     }
                     if (c.input_grads[1]) {
                       Matrix gb = zip(g, av, k == Bcast::kLeftScalar ? Bcast::kRightScalar : Bcast::kSame,
                                       [](double x, double y) { return x * y; });
                       reduce_into(c.input_grads[1], gb);
                     }
                   });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  const Var in[] = {a};
  return a.tape()->record(in, map(a.value(), [s](double x) { return s * x; }),
                          [s](const BackwardContext& c) { reduce_into(c.input_grads[0], c.output_grad, s); });
}

Var add_scalar(Var a, double s) {
  const Var in[] = {a};
  return a.tape()->record(in, map(a.value(), [s](double x) { return x + s; }),
                          [](const BackwardContext& c) { reduce_into(c.input_grads[0], c.output_grad); });
}

Var square(Var a) {
  const Var in[] = {a};
  return a.tape()->record(in, map(a.value(), [](double x) { return x * x; }), [](const BackwardContext& c) {
    const Matrix& x = *c.inputs[0];
    Matrix& ga = *c.input_grads[0];
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * x[i] * c.output_grad[i];
  });
}

Var exp(Var a) {
  const Var in[] = {a};
  return a.tape()->record(in, map(a.value(), [](double x) { return std::exp(x); }), [](const BackwardContext& c) {
    Matrix& ga = *c.input_grads[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c.output[i] * c.output_grad[i];
  });
}

Var relu(Var a) {
  const Var in[] = {a};
  return a.tape()->record(in, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
                          [](const BackwardContext& c) {
                            const Matrix& x = *c.inputs[0];
                            Matrix& ga = *c.input_grads[0];
                            for (std::size_t i = 0; i < x.size(); ++i)
                              if (x[i] > 0.0) ga[i] += c.output_grad[i];
                          });
}

Var sigmoid(Var a) {
  const Var in[] = {a};
  return a.tape()->record(in, map(a.value(), [](double x) { return 1.0 / (1.0 + std::exp(-x)); }),
                          [](const BackwardContext& c) {
                            Matrix& ga = *c.input_grads[0];
                            for (std::size_t i = 0; i < ga.size(); ++i) {
                              const double s = c.output[i];
                              ga[i] += s * (1.0 - s) * c.output_grad[i];
                            }
                          });
}

Var add_row(Var x, Var bias) {
  Tape* t = same_tape(x, bias);
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw DimensionError("add_row: bias " + shape_string(bv) + " does not match " + shape_string(xv));
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.data() + r * out.cols();
    for (std::size_t j = 0; j < out.cols(); ++j) row[j] += bv[j];
  }
  const Var in[] = {x, bias};
  return t->record(in, std::move(out), [](const BackwardContext& c) {
    const Matrix& g = c.output_grad;
    if (c.input_grads[0]) reduce_into(c.input_grads[0], g);
    if (Matrix* gb = c.input_grads[1]) {
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gb)[j] += g(r, j);
    }
  });
}

Var concat_cols(Var a, Var b) {
  Tape* t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows())
    throw DimensionError("concat_cols: row counts differ " + shape_string(av) + " vs " + shape_string(bv));
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix out(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  const Var in[] = {a, b};
  return t->record(in, std::move(out), [ca, cb](const BackwardContext& c) {
    const Matrix& g = c.output_grad;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const double* grow = g.data() + r * (ca + cb);
      if (Matrix* ga = c.input_grads[0])
        for (std::size_t j = 0; j < ca; ++j) (*ga)(r, j) += grow[j];
      if (Matrix* gb = c.input_grads[1])
        for (std::size_t j = 0; j < cb; ++j) (*gb)(r, j) += grow[ca + j];
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Matrix& av = a.value();
  if (begin >= end || end > av.cols())
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                         shape_string(av));
  const std::size_t w = end - begin;
  Matrix out(av.rows(), w);
  for (std::size_t r = 0; r < av.rows(); ++r) std::copy_n(av.data() + r * av.cols() + begin, w, out.data() + r * w);
  const Var in[] = {a};
  return a.tape()->record(in, std::move(out), [begin, w](const BackwardContext& c) {
    Matrix& ga = *c.input_grads[0];
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t j = 0; j < w; ++j) ga(r, begin + j) += c.output_grad(r, j);
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Var in[] = {a};
  return a.tape()->record(in, a.value().reshaped(rows, cols),
                          [](const BackwardContext& c) { reduce_into(c.input_grads[0], c.output_grad); });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const Var in[] = {a};
  return a.tape()->record(in, Matrix::scalar(s), [](const BackwardContext& c) {
    Matrix& ga = *c.input_grads[0];
    const double g = c.output_grad[0];
    for (double& v : ga.values()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

}  // namespace scarf
