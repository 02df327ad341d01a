#include <cmath>

#include "doctest.h"
#include "webrec/error.hpp"
#include "webrec/numeric.hpp"

using namespace webrec;

namespace {

// Independent triple-loop product (j-outer order, separate from the library's i-k-j).
Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t j = 0; j < b.cols(); ++j)
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("softmax_rows on symmetric and degenerate rows") {
  const auto s = softmax_rows(Matrix::from_rows({{0.0, 0.0}}));
  CHECK(s(0, 0) == doctest::Approx(0.5));
  CHECK(s(0, 1) == doctest::Approx(0.5));

  CHECK(softmax_rows(Matrix::from_rows({{42.0}}))(0, 0) == 1.0);

  const auto big = softmax_rows(Matrix::from_rows({{1000.0, 1000.0, 1000.0}}));
  for (double v : big.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax_rows rejects non-finite input and names the row") {
  Matrix m = Matrix::from_rows({{0.0, 1.0}, {NAN, 0.0}});
  try {
    softmax_rows(m);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("softmax rows sum to one on 1000 seeded random matrices") {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto rows = 1 + rng.below(5);
    const auto cols = 1 + rng.below(9);
    const auto m = init_uniform(rows, cols, 30.0, rng);
    const auto s = softmax_rows(m);
    for (std::size_t i = 0; i < rows; ++i) {
      double total = 0.0;
      for (double v : s.row(i)) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("matmul identity, scalar and naive-oracle agreement") {
  Rng rng(3);
  const auto m = init_uniform(3, 4, 1.0, rng);
  CHECK(matmul(Matrix::identity(3), m) == m);
  CHECK(matmul(m, Matrix::identity(4)) == m);
  CHECK(matmul(Matrix(1, 1, 2.0), Matrix(1, 1, 3.0))(0, 0) == 6.0);

  for (int trial = 0; trial < 20; ++trial) {
    const auto a = init_uniform(3, 4, 2.0, rng);
    const auto b = init_uniform(4, 2, 2.0, rng);
    CHECK(max_abs_diff(matmul(a, b), naive_product(a, b)) <= 1e-12);
    CHECK(max_abs_diff(matmul_bt(a, transpose(b)), naive_product(a, b)) <= 1e-12);
    CHECK(max_abs_diff(matmul_at(transpose(a), b), naive_product(a, b)) <= 1e-12);
  }
}

TEST_CASE("matmul reports both shapes on mismatch") {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL("expected an error");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x3 * 2x3") != std::string::npos);
  }
}

TEST_CASE("finite_diff_grad on closed-form functions") {
  const std::vector<double> p0{3.0};
  auto g = finite_diff_grad([](std::span<const double> p) { return p[0] * p[0]; }, p0, 1e-5);
  CHECK(std::abs(g[0] - 6.0) <= 1e-6);

  const std::vector<double> p1{1.0, -2.0, 4.0};
  g = finite_diff_grad([](std::span<const double>) { return 5.0; }, p1, 1e-5);
  for (double v : g) CHECK(v == 0.0);

  const std::vector<double> p2{2.0, 5.0};
  g = finite_diff_grad([](std::span<const double> p) { return p[0] * p[1]; }, p2, 1e-5);
  CHECK(std::abs(g[0] - 5.0) <= 1e-8);
  CHECK(std::abs(g[1] - 2.0) <= 1e-8);
}

TEST_CASE("finite_diff_grad names the coordinate of a non-finite evaluation") {
  const std::vector<double> p{1.0, 0.0};
  try {
    finite_diff_grad([](std::span<const double> x) { return std::sqrt(x[1]); }, p, 1e-3);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
  }
}

TEST_CASE("Rng streams are reproducible per seed") {
  Rng a(123);
  Rng b(123);
  Rng c(124);
  bool differs = false;
  for (int i = 0; i < 10000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);

  Rng u(9);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    CHECK(u.below(7) < 7);
  }
}
