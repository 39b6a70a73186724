#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace scarf {

/// Dense row-major matrix of doubles. Vectors are 1 x n, scalars 1 x 1.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(double v);
  void resize(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Same storage read with a new shape; element count must match.
  Matrix reshaped(std::size_t rows, std::size_t cols) const;
  Matrix transposed() const;

  double max_abs() const;
  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_string(const Matrix& m);

// Kernels. Each output row depends only on the matching input row, with a
// fixed accumulation order, so results never depend on batch size.

/// out = a * b (overwrite) or out += a * b.
void gemm(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate = false);
/// out += a^T * b
void gemm_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out);
Matrix matmul(const Matrix& a, const Matrix& b);

/// A value with an optional gradient. Model parameters are Tensors; the tape
/// refers to them by address and accumulates gradients into them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false)
      : value_(std::move(value)), requires_grad_(requires_grad) {}

  std::array<std::size_t, 2> shape() const { return {value_.rows(), value_.cols()}; }
  std::size_t size() const { return value_.size(); }

  const Matrix& value() const { return value_; }
  Matrix& value() { return value_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  const Matrix& grad() const { return grad_; }
  /// Accumulates into the gradient, allocating zeros on first use.
  void accumulate_grad(const Matrix& g) const;
  void ensure_grad() const;
  void clear_grad() { grad_ = Matrix(); }

 private:
  Matrix value_;
  mutable Matrix grad_;
  bool requires_grad_ = false;
};

}  // namespace scarf
