#include "scarf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "scarf/errors.hpp"

namespace scarf {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols)
    throw DimensionError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " given " +
                         std::to_string(data_.size()) + " values");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    std::copy(row.begin(), row.end(), m.data() + i * c);
    ++i;
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::resize(std::size_t rows, std::size_t cols, double fill) {
  rows_ = rows;
  cols_ = cols;
  data_.assign(rows * cols, fill);
}

Matrix Matrix::reshaped(std::size_t rows, std::size_t cols) const {
  if (rows * cols != size())
    throw DimensionError("cannot reshape " + shape_string(*this) + " to " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  return Matrix(rows, cols, data_);
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double Matrix::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

std::string shape_string(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

namespace {

constexpr std::size_t kColBlock = 8;

// C[RB x W] += A[RB x k] * B[k x W] for one column block. Every output
// element accumulates over k in increasing order whatever RB is, so a row's
// result does not depend on how rows are grouped. Skipping an all-zero column
// of A only drops exact +0 contributions.
template <std::size_t RB, std::size_t W>
void gemm_block(const double* a, std::size_t lda, std::size_t a_step, const double* b, std::size_t ldb, double* c,
                std::size_t ldc, std::size_t k) {
  double acc[RB][W];
  for (std::size_t r = 0; r < RB; ++r)
    for (std::size_t j = 0; j < W; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t p = 0; p < k; ++p) {
    double av[RB];
    bool any = false;
    for (std::size_t r = 0; r < RB; ++r) {
      av[r] = a[r * lda + p * a_step];
      any = any || av[r] != 0.0;
    }
    if (!any) continue;
    const double* brow = b + p * ldb;
    for (std::size_t r = 0; r < RB; ++r)
      for (std::size_t j = 0; j < W; ++j) acc[r][j] += av[r] * brow[j];
  }
  for (std::size_t r = 0; r < RB; ++r)
    for (std::size_t j = 0; j < W; ++j) c[r * ldc + j] = acc[r][j];
}

template <std::size_t RB, std::size_t... Ws>
void gemm_block_dispatch(std::size_t w, const double* a, std::size_t lda, std::size_t a_step, const double* b,
                         std::size_t ldb, double* c, std::size_t ldc, std::size_t k,
                         std::index_sequence<Ws...>) {
  using Fn = void (*)(const double*, std::size_t, std::size_t, const double*, std::size_t, double*, std::size_t,
                      std::size_t);
  static constexpr Fn table[] = {&gemm_block<RB, Ws + 1>...};
  table[w - 1](a, lda, a_step, b, ldb, c, ldc, k);
}

template <std::size_t RB>
void gemm_rows(const double* a, std::size_t lda, std::size_t a_step, const double* b, double* c, std::size_t k,
               std::size_t n) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t w = std::min(kColBlock, n - j0);
    gemm_block_dispatch<RB>(w, a, lda, a_step, b + j0, n, c + j0, n, k, std::make_index_sequence<kColBlock>{});
  }
}

// Row r of the left operand starts at a + r * lda and steps by a_step along k.
void gemm_strided(const double* a, std::size_t lda, std::size_t a_step, std::size_t m, const double* b, double* c,
                  std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * lda, lda, a_step, b, c + i * n, k, n);
  for (; i < m; ++i) gemm_rows<1>(a + i * lda, lda, a_step, b, c + i * n, k, n);
}

}  // namespace

void gemm(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul shape mismatch: " + shape_string(a) + " * " + shape_string(b));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (!accumulate || out.rows() != m || out.cols() != n) {
    if (accumulate && !out.empty()) throw DimensionError("gemm accumulate target has wrong shape");
    out.resize(m, n, 0.0);
  }
  gemm_strided(a.data(), k, 1, m, b.data(), out.data(), k, n);
}

void gemm_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul shape mismatch: " + shape_string(a) + "^T * " + shape_string(b));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (out.rows() != k || out.cols() != n) out.resize(k, n, 0.0);
  // Row p of a^T is column p of a: start a + p, stride k along the sum.
  gemm_strided(a.data(), 1, k, k, b.data(), out.data(), m, n);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out;
  gemm(a, b, out);
  return out;
}

void Tensor::ensure_grad() const {
  if (grad_.rows() != value_.rows() || grad_.cols() != value_.cols())
    grad_ = Matrix(value_.rows(), value_.cols());
}

void Tensor::accumulate_grad(const Matrix& g) const {
  if (g.rows() != value_.rows() || g.cols() != value_.cols())
    throw DimensionError("gradient " + shape_string(g) + " does not match value " + shape_string(value_));
  ensure_grad();
  double* dst = grad_.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

}  // namespace scarf
