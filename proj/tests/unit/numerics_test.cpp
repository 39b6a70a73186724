#include <doctest.h>

#include <cmath>
#include <numbers>

#include "scarf/errors.hpp"
#include "scarf/tape.hpp"
#include "support.hpp"

using namespace scarf;
using scarf::test::max_gradient_error;
using scarf::test::random_matrix;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

double max_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Every test input is a random matrix in [-2, 2]; the weights make the loss
// depend on every output entry differently.
Var weighted_sum(Tape& tape, Var v, std::uint64_t seed) {
  Prng prng(seed);
  return sum(mul(v, tape.constant(random_matrix(v.rows(), v.cols(), prng))));
}

}  // namespace

TEST_CASE("gemm matches a long-double reference on awkward shapes") {
  Prng prng(1);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 4, 2}, {17, 33, 9}, {64, 70, 129}, {5, 1, 31}}) {
    const Matrix a = random_matrix(m, k, prng), b = random_matrix(k, n, prng);
    CHECK(max_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
    Matrix acc = random_matrix(m, n, prng);
    const Matrix before = acc;
    gemm(a, b, acc, true);
    Matrix expect = naive_matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += before[i];
    CHECK(max_diff(acc, expect) < 1e-12);
    Matrix tn(k, n);
    const Matrix c = random_matrix(m, n, prng);
    gemm_tn_accumulate(a, c, tn);
    CHECK(max_diff(tn, naive_matmul(a.transposed(), c)) < 1e-12);
  }
}

TEST_CASE("gemm rows do not depend on the batch they are computed in") {
  Prng prng(2);
  const Matrix a = random_matrix(37, 21, prng), b = random_matrix(21, 13, prng);
  const Matrix full = matmul(a, b);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    Matrix one(1, a.cols());
    for (std::size_t c = 0; c < a.cols(); ++c) one(0, c) = a(r, c);
    const Matrix row = matmul(one, b);
    for (std::size_t c = 0; c < b.cols(); ++c) CHECK(row(0, c) == full(r, c));
  }
}

TEST_CASE("matmul examples and shape errors") {
  Tape tape(false);
  const Var id = tape.constant(Matrix::from_rows({{1, 0}, {0, 1}}));
  const Var b = tape.constant(Matrix::from_rows({{3, 4}, {5, 6}}));
  CHECK(matmul(id, b).value() == Matrix::from_rows({{3, 4}, {5, 6}}));
  CHECK(matmul(tape.constant(Matrix::scalar(2)), tape.constant(Matrix::scalar(3))).item() == 6.0);
  try {
    matmul(tape.constant(Matrix(2, 3)), tape.constant(Matrix(2, 3)));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("matmul associativity at value level") {
  Prng prng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(4, 5, prng), b = random_matrix(5, 3, prng), c = random_matrix(3, 6, prng);
    CHECK(max_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10);
  }
}

TEST_CASE("elementwise examples") {
  Tape tape(false);
  CHECK(relu(tape.constant(Matrix::from_rows({{-1, 0, 2}}))).value() == Matrix::from_rows({{0, 0, 2}}));
  CHECK(sigmoid(tape.constant(Matrix::scalar(0))).item() == 0.5);
  CHECK(neg(tape.constant(Matrix::scalar(2))).item() == -2.0);
  CHECK(square(tape.constant(Matrix::scalar(-3))).item() == 9.0);
  CHECK(sub(tape.constant(Matrix::scalar(1)), tape.constant(Matrix::scalar(4))).item() == -3.0);
  CHECK(add_scalar(scale(tape.constant(Matrix::scalar(2)), 3.0), 1.0).item() == 7.0);
  CHECK(mean(tape.constant(Matrix::from_rows({{1, 2}, {3, 6}}))).item() == 3.0);
}

TEST_CASE("exp gradient at 1 equals e") {
  Tensor x(Matrix::scalar(1.0), true);
  Tape tape;
  tape.backward(exp(tape.param(x)));
  CHECK(std::abs(x.grad()[0] - std::numbers::e) < 1e-10);
}

TEST_CASE("elementwise broadcasting is scalar only") {
  Tape tape(false);
  const Var a = tape.constant(Matrix(2, 3, 1.0));
  CHECK(add(a, tape.constant(Matrix::scalar(2))).value() == Matrix(2, 3, 3.0));
  CHECK(mul(tape.constant(Matrix::scalar(2)), a).value() == Matrix(2, 3, 2.0));
  CHECK_THROWS_AS(add(a, tape.constant(Matrix(1, 3))), DimensionError);
  CHECK_THROWS_AS(mul(a, tape.constant(Matrix(3, 2))), DimensionError);
  CHECK_THROWS_AS(sub(a, tape.constant(Matrix(2, 1))), DimensionError);
  CHECK_THROWS_AS(add_row(a, tape.constant(Matrix(1, 2))), DimensionError);
  CHECK_THROWS_AS(concat_cols(a, tape.constant(Matrix(3, 1))), DimensionError);
  CHECK_THROWS_AS(slice_cols(a, 1, 4), DimensionError);
}

TEST_CASE("every differentiable op matches central differences") {
  using scarf::test::away_from_zero;
  Prng prng(4);
  struct Case {
    const char* name;
    std::vector<Matrix> inputs;
    test::ScalarFn fn;
  };
  const std::vector<Case> cases = {
      {"matmul", {random_matrix(3, 4, prng), random_matrix(4, 2, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, matmul(v[0], v[1]), 1); }},
      {"add", {random_matrix(3, 2, prng), random_matrix(3, 2, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, add(v[0], v[1]), 2); }},
      {"add scalar operand", {random_matrix(3, 2, prng), random_matrix(1, 1, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, add(v[1], v[0]), 3); }},
      {"sub", {random_matrix(2, 3, prng), random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, sub(v[0], v[1]), 4); }},
      {"sub scalar operand", {random_matrix(2, 3, prng), random_matrix(1, 1, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, sub(v[0], v[1]), 5); }},
      {"mul", {random_matrix(2, 3, prng), random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, mul(v[0], v[1]), 6); }},
      {"mul scalar operand", {random_matrix(2, 3, prng), random_matrix(1, 1, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, mul(v[1], v[0]), 7); }},
      {"neg", {random_matrix(2, 2, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, neg(v[0]), 8); }},
      {"square", {random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, square(v[0]), 9); }},
      {"exp", {random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, exp(v[0]), 10); }},
      {"relu", {away_from_zero(random_matrix(3, 3, prng))},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, relu(v[0]), 11); }},
      {"sigmoid", {random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, sigmoid(v[0]), 12); }},
      {"scale", {random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, scale(v[0], -1.7), 13); }},
      {"add_scalar", {random_matrix(2, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, square(add_scalar(v[0], 0.3)), 14); }},
      {"add_row", {random_matrix(4, 3, prng), random_matrix(1, 3, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, add_row(v[0], v[1]), 15); }},
      {"concat_cols", {random_matrix(3, 2, prng), random_matrix(3, 4, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, concat_cols(v[0], v[1]), 16); }},
      {"slice_cols", {random_matrix(3, 5, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, slice_cols(v[0], 1, 4), 17); }},
      {"reshape", {random_matrix(2, 6, prng)},
       [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, reshape(v[0], 4, 3), 18); }},
      {"sum", {random_matrix(3, 3, prng)}, [](Tape&, const std::vector<Var>& v) { return sum(square(v[0])); }},
      {"mean", {random_matrix(3, 3, prng)}, [](Tape&, const std::vector<Var>& v) { return mean(square(v[0])); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    std::vector<Tensor> inputs;
    for (const Matrix& m : c.inputs) inputs.emplace_back(m);
    CHECK(max_gradient_error(inputs, c.fn) < 1e-6);
  }
}

TEST_CASE("backward on sum gives ones") {
  Tensor x(Matrix(3, 4, 0.25), true);
  Tape tape;
  tape.backward(sum(tape.param(x)));
  CHECK(x.grad() == Matrix(3, 4, 1.0));
}

TEST_CASE("least squares gradient equals 2 A^T (A x - b)") {
  Prng prng(5);
  const Matrix a = random_matrix(5, 3, prng), b = random_matrix(5, 1, prng);
  std::vector<Tensor> x{Tensor(random_matrix(3, 1, prng))};
  const auto fn = [&](Tape& t, const std::vector<Var>& v) {
    return sum(square(sub(matmul(t.constant(a), v[0]), t.constant(b))));
  };
  CHECK(max_gradient_error(x, fn) < 1e-6);
  Matrix r = matmul(a, x[0].value());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= b[i];
  const Matrix expect = matmul(a.transposed(), r);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(x[0].grad()[i] - 2 * expect[i]) < 1e-12);
}

TEST_CASE("backward contract") {
  Tensor x(Matrix(2, 2, 1.0), true);
  SUBCASE("non-scalar loss") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(tape.param(x)), ContractError);
  }
  SUBCASE("second backward") {
    Tape tape;
    const Var loss = sum(tape.param(x));
    tape.backward(loss);
    CHECK(tape.consumed());
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
  SUBCASE("recording after backward") {
    Tape tape;
    const Var p = tape.param(x);
    tape.backward(sum(p));
    CHECK_THROWS_AS(sum(p), ContractError);
  }
  SUBCASE("value-only tape") {
    Tape tape(false);
    CHECK_THROWS_AS(tape.backward(sum(tape.param(x))), ContractError);
  }
}

TEST_CASE("unreached leaves still receive a zero gradient") {
  Tensor used(Matrix(1, 2, 1.0), true), unused(Matrix(2, 2, 3.0), true);
  Tape tape;
  tape.param(unused);
  tape.backward(sum(tape.param(used)));
  REQUIRE(unused.has_grad());
  CHECK(unused.grad() == Matrix(2, 2, 0.0));
}

TEST_CASE("a leaf used twice accumulates both paths") {
  Prng prng(6);
  const Matrix w1 = random_matrix(3, 3, prng), w2 = random_matrix(3, 3, prng);
  Tensor x(random_matrix(3, 3, prng), true);
  {
    Tape tape;
    const Var p = tape.param(x);
    tape.backward(add(sum(mul(p, tape.constant(w1))), sum(mul(p, tape.constant(w2)))));
  }
  // Same function with two distinct leaves holding the same value.
  Tensor a(x.value(), true), b(x.value(), true);
  {
    Tape tape;
    tape.backward(add(sum(mul(tape.param(a), tape.constant(w1))), sum(mul(tape.param(b), tape.constant(w2)))));
  }
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(a.grad()[i] + b.grad()[i]));
}

TEST_CASE("gradients accumulate across tapes until cleared") {
  Tensor x(Matrix::scalar(2.0), true);
  for (int i = 0; i < 3; ++i) {
    Tape tape;
    tape.backward(square(tape.param(x)));
  }
  CHECK(x.grad()[0] == 12.0);
  x.clear_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("frozen tensors get no gradient") {
  Tensor frozen(Matrix::scalar(2.0), false), live(Matrix::scalar(3.0), true);
  Tape tape;
  tape.backward(mul(tape.param(frozen), tape.param(live)));
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.grad()[0] == 2.0);
}

TEST_CASE("prng streams are reproducible and split independently") {
  Prng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Prng parent(42);
  const Prng c1 = parent.split(1), c2 = parent.split(1), c3 = parent.split(2);
  CHECK(parent.counter() == 0);
  Prng x = c1, y = c2, z = c3;
  CHECK(x.next_u64() == y.next_u64());
  CHECK(x.next_u64() != z.next_u64());
  double m = 0, s = 0;
  Prng n(7);
  const int count = 20000;
  for (int i = 0; i < count; ++i) {
    const double v = n.normal();
    m += v;
    s += v * v;
  }
  CHECK(std::abs(m / count) < 0.03);
  CHECK(std::abs(s / count - 1.0) < 0.05);
  for (int i = 0; i < 1000; ++i) CHECK(n.below(7) < 7);
}
