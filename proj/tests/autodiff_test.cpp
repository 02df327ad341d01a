#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "webrec/autodiff.hpp"
#include "webrec/numeric.hpp"

using namespace webrec;
using ad::Variable;

namespace {

using Builder = std::function<Variable(const std::vector<Variable>&)>;

// Reduces an op's output to a scalar through fixed random weights so that
// every output entry contributes a distinct gradient.
double check_op(const Builder& op, std::vector<Matrix> inputs, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<Variable> params;
  for (auto& m : inputs) params.push_back(Variable::parameter(m));
  const auto probe = op(params);
  const auto weights = Variable::constant(init_uniform(probe.rows(), probe.cols(), 1.0, rng));
  auto loss_of = [&](const std::vector<Variable>& ps) { return ad::sum(ad::hadamard(op(ps), weights)); };

  loss_of(params).backward();
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto analytic = params[p].grad();
    auto f = [&](std::span<const double> x) {
      std::vector<Variable> ps;
      for (std::size_t q = 0; q < inputs.size(); ++q) {
        Matrix m = inputs[q];
        if (q == p) std::copy(x.begin(), x.end(), m.data().begin());
        ps.push_back(Variable::constant(m));
      }
      return loss_of(ps).value()(0, 0);
    };
    const auto numeric = finite_diff_grad(f, inputs[p].data(), 1e-5);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic.data()[i];
      const double n = numeric[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}));
    }
  }
  return worst;
}

Matrix rnd(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return init_uniform(r, c, 1.0, rng);
}

}  // namespace

TEST_CASE("elementwise and matrix op gradients match central differences") {
  CHECK(check_op([](auto& v) { return ad::matmul(v[0], v[1]); }, {rnd(3, 4, 1), rnd(4, 2, 2)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::matmul_bt(v[0], v[1]); }, {rnd(3, 4, 3), rnd(5, 4, 4)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::add(v[0], v[1]); }, {rnd(2, 3, 5), rnd(2, 3, 6)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::add_row(v[0], v[1]); }, {rnd(4, 3, 7), rnd(1, 3, 8)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::scale(v[0], -2.5); }, {rnd(2, 2, 9)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::mul_scalar(v[0], v[1]); }, {rnd(3, 2, 10), rnd(1, 1, 11)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::hadamard(v[0], v[1]); }, {rnd(3, 3, 12), rnd(3, 3, 13)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::gelu(v[0]); }, {rnd(4, 4, 14)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::rms_norm(v[0], v[1]); }, {rnd(3, 5, 16), rnd(1, 5, 17)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::transpose(v[0]); }, {rnd(2, 5, 15)}) < 1e-6);
  // relu away from the kink
  Matrix away = Matrix::from_rows({{0.5, -0.7, 1.2}, {-0.3, 0.9, -1.1}});
  CHECK(check_op([](auto& v) { return ad::relu(v[0]); }, {away}) < 1e-6);
}

TEST_CASE("structural op gradients") {
  CHECK(check_op(
            [](auto& v) {
              std::vector<Variable> parts{v[0], v[1]};
              return ad::concat_cols(parts);
            },
            {rnd(3, 2, 20), rnd(3, 4, 21)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::concat_rows(v[0], v[1]); }, {rnd(2, 3, 22), rnd(1, 3, 23)}) <
        1e-6);
  CHECK(check_op([](auto& v) { return ad::slice_cols(v[0], 1, 3); }, {rnd(3, 4, 24)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::slice_rows(v[0], 1, 3); }, {rnd(4, 2, 25)}) < 1e-6);
  const std::vector<std::size_t> idx{2, 0, 2};
  CHECK(check_op([&](auto& v) { return ad::gather_rows(v[0], idx); }, {rnd(3, 2, 26)}) < 1e-6);
  const std::vector<std::size_t> cols{1, 3, 1};
  CHECK(check_op([&](auto& v) { return ad::gather_cols(v[0], cols); }, {rnd(2, 4, 29)}) < 1e-6);
  const std::vector<std::size_t> into{3, 1};
  CHECK(check_op([&](auto& v) { return ad::scatter_rows(v[0], into, v[1]); },
                 {rnd(4, 3, 27), rnd(2, 3, 28)}) < 1e-6);
}

TEST_CASE("masked softmax, cosine and cross entropy gradients") {
  const std::vector<std::size_t> valid{1, 3, 4};
  CHECK(check_op([&](auto& v) { return ad::masked_softmax(v[0], valid); }, {rnd(3, 4, 30)}) < 1e-6);
  CHECK(check_op([](auto& v) { return ad::cosine_rows(v[0], v[1]); }, {rnd(1, 5, 31), rnd(4, 5, 32)}) <
        1e-6);
  const std::vector<std::size_t> labels{1, 0, 3};
  CHECK(check_op([&](auto& v) { return ad::cross_entropy_sum(v[0], labels); }, {rnd(3, 4, 33)}) < 1e-6);
}

TEST_CASE("masked softmax leaves masked entries exactly zero") {
  const auto s = ad::masked_softmax(Variable::constant(rnd(3, 3, 40)), std::vector<std::size_t>{1, 2, 3});
  CHECK(s.value()(0, 0) == 1.0);
  CHECK(s.value()(0, 1) == 0.0);
  CHECK(s.value()(0, 2) == 0.0);
  CHECK(s.value()(1, 2) == 0.0);
}

TEST_CASE("cosine of a zero vector is zero with zero gradient") {
  auto u = Variable::parameter(Matrix::from_rows({{1.0, 2.0}}));
  auto e = Variable::parameter(Matrix::from_rows({{0.0, 0.0}, {2.0, 4.0}}));
  const auto c = ad::cosine_rows(u, e);
  CHECK(c.value()(0, 0) == 0.0);
  CHECK(c.value()(1, 0) == doctest::Approx(1.0));
  ad::sum(c).backward();
  CHECK(e.grad()(0, 0) == 0.0);
  CHECK(e.grad()(0, 1) == 0.0);
}

TEST_CASE("cross entropy floor counts clamped rows") {
  const auto logits = Variable::parameter(Matrix::from_rows({{0.0, 100.0}, {0.0, 0.0}}));
  std::size_t clamped = 0;
  const std::vector<std::size_t> labels{0, 0};
  const auto loss = ad::cross_entropy_sum(logits, labels, 1e-12, &clamped);
  CHECK(clamped == 1);
  CHECK(loss.value()(0, 0) == doctest::Approx(-std::log(1e-12) + std::log(2.0)));
  loss.backward();
  CHECK(logits.grad()(0, 0) == 0.0);
  CHECK(logits.grad()(1, 0) == doctest::Approx(-0.5));
}

TEST_CASE("constants record no graph and shared subexpressions accumulate") {
  const auto c = ad::matmul(Variable::constant(rnd(2, 2, 50)), Variable::constant(rnd(2, 2, 51)));
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->parents.empty());

  auto x = Variable::parameter(Matrix::from_rows({{3.0}}));
  const auto y = ad::hadamard(x, x);
  ad::add(y, x).backward();
  CHECK(x.grad()(0, 0) == doctest::Approx(7.0));

  x.zero_grad();
  ad::sum(ad::scale(x, 2.0)).backward();
  CHECK(x.grad()(0, 0) == doctest::Approx(2.0));
}
