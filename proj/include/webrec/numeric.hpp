#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace webrec {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  /// Row-wise literal, e.g. Matrix::from_rows({{1, 2}, {3, 4}}).
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);

/// Numerically stable row softmax. Throws DataError naming the first
/// row that contains a non-finite entry.
Matrix softmax_rows(const Matrix& m);

double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m);

/// Seeded generator. The engine is mt19937_64, whose output sequence is
/// fixed by the standard; the real-valued conversions are done here so
/// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) by rejection; n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal by Box-Muller.
  double normal();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Mixes a 64-bit value (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);
/// FNV-1a over bytes.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ULL);

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in is rows.
Matrix init_projection(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Matrix init_uniform(std::size_t rows, std::size_t cols, double bound, Rng& rng);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(p + eps e_i) - f(p - eps e_i)) / (2 eps).
/// Throws DataError naming the coordinate if f is not finite there.
std::vector<double> finite_diff_grad(const ScalarFn& f, std::span<const double> p, double eps);

}  // namespace webrec
