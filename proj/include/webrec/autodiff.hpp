#pragma once

// Matrix-granular reverse-mode differentiation. Every op takes and returns
// Variables; an op whose inputs all have requires_grad() == false returns a
// plain constant and records nothing, so inference through the same code
// path costs one allocation per op and no closures.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "webrec/numeric.hpp"

namespace webrec::ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix& grad)> backward;
};

class Variable {
 public:
  Variable() = default;
  explicit Variable(Matrix value, bool requires_grad = false);

  static Variable constant(Matrix value) { return Variable(std::move(value), false); }
  static Variable parameter(Matrix value) { return Variable(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading.
  Matrix& mutable_value() { return node_->value; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Gradient accumulated by backward(); zero-filled if none has arrived.
  const Matrix& grad() const;
  void zero_grad();

  /// Seeds d(this)/d(this) = 1; this must be 1x1.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Variable(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Variable make_result(Matrix value, std::vector<Variable> parents,
                              std::function<void(const Matrix&)> backward);

  std::shared_ptr<Node> node_;
};

/// Builds an op output. `backward` is dropped when no parent needs a gradient.
Variable make_result(Matrix value, std::vector<Variable> parents,
                     std::function<void(const Matrix&)> backward);

/// Adds `g` into the gradient of `v` if it requires one.
void accumulate(const Variable& v, const Matrix& g);

Variable matmul(const Variable& a, const Variable& b);
/// a * b^T
Variable matmul_bt(const Variable& a, const Variable& b);
Variable add(const Variable& a, const Variable& b);
/// Adds a 1 x cols row to every row of `a`.
Variable add_row(const Variable& a, const Variable& row);
Variable scale(const Variable& a, double s);
/// s (1x1) times a.
Variable mul_scalar(const Variable& a, const Variable& s);
Variable hadamard(const Variable& a, const Variable& b);
Variable relu(const Variable& a);
/// tanh approximation of GELU.
Variable gelu(const Variable& a);
Variable transpose(const Variable& a);
/// gain * x_i / sqrt(mean(x_i^2) + eps) per row; gain is 1 x cols.
Variable rms_norm(const Variable& x, const Variable& gain, double eps = 1e-6);

/// Row softmax where row r only sees columns [0, valid[r]); masked entries
/// are exactly 0 in the output.
Variable masked_softmax(const Variable& scores, std::span<const std::size_t> valid);

Variable concat_cols(std::span<const Variable> parts);
Variable concat_rows(const Variable& top, const Variable& bottom);
Variable slice_cols(const Variable& a, std::size_t begin, std::size_t end);
Variable slice_rows(const Variable& a, std::size_t begin, std::size_t end);
Variable gather_rows(const Variable& a, std::span<const std::size_t> index);
Variable gather_cols(const Variable& a, std::span<const std::size_t> index);
/// Copy of `base` with row index[i] replaced by rows(i).
Variable scatter_rows(const Variable& base, std::span<const std::size_t> index, const Variable& rows);

/// c_i = cos(u, E_i) for a 1 x d `u` and n x d `E`; returns n x 1. A zero-norm
/// operand yields c_i = 0 with zero gradient.
Variable cosine_rows(const Variable& u, const Variable& e);

/// Sum over rows r of -log(max(softmax(logits_r)[labels[r]], floor)). Rows
/// that hit the floor are counted in *clamped and contribute no gradient.
Variable cross_entropy_sum(const Variable& logits, std::span<const std::size_t> labels,
                           double floor = 1e-12, std::size_t* clamped = nullptr);

Variable sum(const Variable& a);

}  // namespace webrec::ad
