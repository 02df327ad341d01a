#include "webrec/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "webrec/error.hpp"

namespace webrec::ad {

namespace {

void add_into(Matrix& dst, const Matrix& src) {
  if (dst.empty() && src.size() > 0 && dst.rows() == 0) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

}  // namespace

Variable::Variable(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Matrix& Variable::grad() const {
  if (node_->grad.rows() != node_->value.rows() || node_->grad.cols() != node_->value.cols()) {
    node_->grad = Matrix(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

void Variable::zero_grad() { node_->grad = Matrix(node_->value.rows(), node_->value.cols()); }

void Variable::backward() const {
  if (rows() != 1 || cols() != 1) {
    throw ShapeError("backward: output must be 1x1, got " + node_->value.shape_string());
  }
  if (!node_->requires_grad) return;

  // Post-order DFS gives a topological order; walk it in reverse.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad = Matrix(n->value.rows(), n->value.cols());
  }
  node_->grad = Matrix(1, 1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(n->grad);
  }
}

Variable make_result(Matrix value, std::vector<Variable> parents,
                     std::function<void(const Matrix&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const Variable& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Variable(std::move(node));
}

void accumulate(const Variable& v, const Matrix& g) {
  if (!v.requires_grad()) return;
  Matrix& dst = v.node()->grad;
  if (dst.rows() != v.rows() || dst.cols() != v.cols()) dst = Matrix(v.rows(), v.cols());
  require_same_shape(dst, g, "accumulate");
  add_into(dst, g);
}

Variable matmul(const Variable& a, const Variable& b) {
  return make_result(webrec::matmul(a.value(), b.value()), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) accumulate(a, webrec::matmul_bt(g, b.value()));
    if (b.requires_grad()) accumulate(b, webrec::matmul_at(a.value(), g));
  });
}

Variable matmul_bt(const Variable& a, const Variable& b) {
  return make_result(webrec::matmul_bt(a.value(), b.value()), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) accumulate(a, webrec::matmul(g, b.value()));
    if (b.requires_grad()) accumulate(b, webrec::matmul_at(g, a.value()));
  });
}

Variable add(const Variable& a, const Variable& b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.value().data()[i];
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Variable add_row(const Variable& a, const Variable& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + a.value().shape_string() + " + " + row.value().shape_string());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += row.value()(0, j);
  return make_result(std::move(out), {a, row}, [a, row](const Matrix& g) {
    accumulate(a, g);
    if (row.requires_grad()) {
      Matrix gr(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
      accumulate(row, gr);
    }
  });
}

Variable scale(const Variable& a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= s;
  return make_result(std::move(out), {a}, [a, s](const Matrix& g) {
    Matrix ga = g;
    for (double& v : ga.data()) v *= s;
    accumulate(a, ga);
  });
}

Variable mul_scalar(const Variable& a, const Variable& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("mul_scalar: scalar must be 1x1");
  const double sv = s.value()(0, 0);
  Matrix out = a.value();
  for (double& v : out.data()) v *= sv;
  return make_result(std::move(out), {a, s}, [a, s](const Matrix& g) {
    const double sv = s.value()(0, 0);
    if (a.requires_grad()) {
      Matrix ga = g;
      for (double& v : ga.data()) v *= sv;
      accumulate(a, ga);
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * a.value().data()[i];
      accumulate(s, Matrix(1, 1, acc));
    }
  });
}

Variable hadamard(const Variable& a, const Variable& b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
  return make_result(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) {
      Matrix ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= b.value().data()[i];
      accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Matrix gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= a.value().data()[i];
      accumulate(b, gb);
    }
  });
}

Variable relu(const Variable& a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [a](const Matrix& g) {
    Matrix ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (!(a.value().data()[i] > 0.0)) ga.data()[i] = 0.0;
    accumulate(a, ga);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Variable gelu(const Variable& a) {
  Matrix out = a.value();
  for (double& x : out.data()) x = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  return make_result(std::move(out), {a}, [a](const Matrix& g) {
    Matrix ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = a.value().data()[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ga.data()[i] *= 0.5 * (1.0 + t) + 0.5 * x * dt;
    }
    accumulate(a, ga);
  });
}

Variable transpose(const Variable& a) {
  return make_result(webrec::transpose(a.value()), {a},
                     [a](const Matrix& g) { accumulate(a, webrec::transpose(g)); });
}

Variable masked_softmax(const Variable& scores, std::span<const std::size_t> valid) {
  const Matrix& s = scores.value();
  if (valid.size() != s.rows()) throw ShapeError("masked_softmax: valid length != rows");
  Matrix out(s.rows(), s.cols());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    const std::size_t n = valid[r];
    if (n == 0 || n > s.cols()) {
      throw ShapeError("masked_softmax: row " + std::to_string(r) + " has invalid support " +
                       std::to_string(n));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(s(r, j))) {
        throw DataError("masked_softmax: non-finite score in row " + std::to_string(r));
      }
      mx = std::max(mx, s(r, j));
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out(r, j) = std::exp(s(r, j) - mx);
      total += out(r, j);
    }
    for (std::size_t j = 0; j < n; ++j) out(r, j) /= total;
  }
  std::vector<std::size_t> support(valid.begin(), valid.end());
  auto result = make_result(std::move(out), {scores}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<Node> self = result.node();
    result.node()->backward = [scores, support, self](const Matrix& g) {
      const Matrix& y = self.lock()->value;
      Matrix gs(y.rows(), y.cols());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < support[r]; ++j) dot += y(r, j) * g(r, j);
        for (std::size_t j = 0; j < support[r]; ++j) gs(r, j) = y(r, j) * (g(r, j) - dot);
      }
      accumulate(scores, gs);
    };
  }
  return result;
}

Variable concat_cols(std::span<const Variable> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(p.value().row(i).begin(), p.value().row(i).end(), out.row(i).begin() + off);
    off += p.cols();
  }
  std::vector<Variable> ps(parts.begin(), parts.end());
  return make_result(std::move(out), ps, [ps](const Matrix& g) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      if (p.requires_grad()) {
        Matrix gp(p.rows(), p.cols());
        for (std::size_t i = 0; i < p.rows(); ++i)
          for (std::size_t j = 0; j < p.cols(); ++j) gp(i, j) = g(i, off + j);
        accumulate(p, gp);
      }
      off += p.cols();
    }
  });
}

Variable concat_rows(const Variable& top, const Variable& bottom) {
  if (top.rows() == 0) return bottom;
  if (top.cols() != bottom.cols()) {
    throw ShapeError("concat_rows: " + top.value().shape_string() + " over " +
                     bottom.value().shape_string());
  }
  Matrix out(top.rows() + bottom.rows(), top.cols());
  std::copy(top.value().data().begin(), top.value().data().end(), out.data().begin());
  std::copy(bottom.value().data().begin(), bottom.value().data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(top.value().size()));
  return make_result(std::move(out), {top, bottom}, [top, bottom](const Matrix& g) {
    const auto split = static_cast<std::ptrdiff_t>(top.value().size());
    if (top.requires_grad()) {
      accumulate(top, Matrix(top.rows(), top.cols(),
                             std::vector<double>(g.data().begin(), g.data().begin() + split)));
    }
    if (bottom.requires_grad()) {
      accumulate(bottom, Matrix(bottom.rows(), bottom.cols(),
                                std::vector<double>(g.data().begin() + split, g.data().end())));
    }
  });
}

Variable slice_cols(const Variable& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw ShapeError("slice_cols: bad range");
  Matrix out(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a.value()(i, j);
  return make_result(std::move(out), {a}, [a, begin, end](const Matrix& g) {
    Matrix ga(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = begin; j < end; ++j) ga(i, j) = g(i, j - begin);
    accumulate(a, ga);
  });
}

Variable slice_rows(const Variable& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows: bad range");
  const auto c = a.cols();
  Matrix out(end - begin, c,
             std::vector<double>(a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                 a.value().data().begin() + static_cast<std::ptrdiff_t>(end * c)));
  return make_result(std::move(out), {a}, [a, begin, c](const Matrix& g) {
    Matrix ga(a.rows(), c);
    std::copy(g.data().begin(), g.data().end(),
              ga.data().begin() + static_cast<std::ptrdiff_t>(begin * c));
    accumulate(a, ga);
  });
}

Variable gather_rows(const Variable& a, std::span<const std::size_t> index) {
  Matrix out(index.size(), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy(a.value().row(index[i]).begin(), a.value().row(index[i]).end(), out.row(i).begin());
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out), {a}, [a, idx](const Matrix& g) {
    Matrix ga(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) ga(idx[i], j) += g(i, j);
    accumulate(a, ga);
  });
}

Variable rms_norm(const Variable& x, const Variable& gain, double eps) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d) {
    throw ShapeError("rms_norm: gain " + gain.value().shape_string() + " for width " + std::to_string(d));
  }
  std::vector<double> inv(n);
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    for (double v : x.value().row(i)) ms += v * v;
    inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = gain.value()(0, j) * x.value()(i, j) * inv[i];
  }
  return make_result(std::move(out), {x, gain}, [x, gain, inv, d](const Matrix& g) {
    const auto& xv = x.value();
    const auto& gv = gain.value();
    if (x.requires_grad()) {
      Matrix gx(xv.rows(), d);
      for (std::size_t i = 0; i < xv.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g(i, j) * gv(0, j) * xv(i, j);
        const double r3 = inv[i] * inv[i] * inv[i] / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) gx(i, j) = g(i, j) * gv(0, j) * inv[i] - xv(i, j) * dot * r3;
      }
      accumulate(x, gx);
    }
    if (gain.requires_grad()) {
      Matrix gg(1, d);
      for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) gg(0, j) += g(i, j) * xv(i, j) * inv[i];
      accumulate(gain, gg);
    }
  });
}

Variable gather_cols(const Variable& a, std::span<const std::size_t> index) {
  Matrix out(a.rows(), index.size());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= a.cols()) throw ShapeError("gather_cols: index out of range");
    for (std::size_t r = 0; r < a.rows(); ++r) out(r, j) = a.value()(r, index[j]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out), {a}, [a, idx](const Matrix& g) {
    Matrix ga(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t j = 0; j < idx.size(); ++j) ga(r, idx[j]) += g(r, j);
    accumulate(a, ga);
  });
}

Variable scatter_rows(const Variable& base, std::span<const std::size_t> index, const Variable& rows) {
  if (rows.rows() != index.size() || rows.cols() != base.cols()) {
    throw ShapeError("scatter_rows: shape mismatch");
  }
  Matrix out = base.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= base.rows()) throw ShapeError("scatter_rows: index out of range");
    std::copy(rows.value().row(i).begin(), rows.value().row(i).end(), out.row(index[i]).begin());
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out), {base, rows}, [base, rows, idx](const Matrix& g) {
    if (base.requires_grad()) {
      Matrix gb = g;
      for (std::size_t r : idx)
        for (double& v : gb.row(r)) v = 0.0;
      accumulate(base, gb);
    }
    if (rows.requires_grad()) {
      Matrix gr(idx.size(), g.cols());
      for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(g.row(idx[i]).begin(), g.row(idx[i]).end(), gr.row(i).begin());
      accumulate(rows, gr);
    }
  });
}

Variable cosine_rows(const Variable& u, const Variable& e) {
  if (u.rows() != 1 || u.cols() != e.cols()) {
    throw ShapeError("cosine_rows: " + u.value().shape_string() + " vs " + e.value().shape_string());
  }
  const std::size_t n = e.rows();
  const std::size_t d = e.cols();
  double un = 0.0;
  for (double v : u.value().data()) un += v * v;
  un = std::sqrt(un);
  std::vector<double> en(n);
  Matrix out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dot += u.value()(0, k) * e.value()(i, k);
      sq += e.value()(i, k) * e.value()(i, k);
    }
    en[i] = std::sqrt(sq);
    out(i, 0) = (un > 0.0 && en[i] > 0.0) ? dot / (un * en[i]) : 0.0;
  }
  auto result = make_result(out, {u, e}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [u, e, un, en, c = std::move(out), n, d](const Matrix& g) {
      Matrix gu(1, d);
      Matrix ge(n, d);
      for (std::size_t i = 0; i < n; ++i) {
        if (!(un > 0.0 && en[i] > 0.0)) continue;
        const double gi = g(i, 0);
        const double inv = 1.0 / (un * en[i]);
        for (std::size_t k = 0; k < d; ++k) {
          const double uk = u.value()(0, k);
          const double ek = e.value()(i, k);
          gu(0, k) += gi * (ek * inv - c(i, 0) * uk / (un * un));
          ge(i, k) += gi * (uk * inv - c(i, 0) * ek / (en[i] * en[i]));
        }
      }
      accumulate(u, gu);
      accumulate(e, ge);
    };
  }
  return result;
}

Variable cross_entropy_sum(const Variable& logits, std::span<const std::size_t> labels,
                           double floor, std::size_t* clamped) {
  const Matrix& z = logits.value();
  if (labels.size() != z.rows()) throw ShapeError("cross_entropy_sum: labels != rows");
  Matrix prob(z.rows(), z.cols());
  std::vector<bool> hit_floor(z.rows(), false);
  double loss = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (labels[r] >= z.cols()) throw ShapeError("cross_entropy_sum: label out of vocabulary");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.row(r)) {
      if (!std::isfinite(v)) throw DataError("cross_entropy_sum: non-finite logit in row " + std::to_string(r));
      mx = std::max(mx, v);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) {
      prob(r, j) = std::exp(z(r, j) - mx);
      total += prob(r, j);
    }
    for (std::size_t j = 0; j < z.cols(); ++j) prob(r, j) /= total;
    const double p = prob(r, labels[r]);
    if (p < floor) {
      hit_floor[r] = true;
      if (clamped) ++*clamped;
      loss += -std::log(floor);
    } else {
      // log-sum-exp form keeps precision when p is close to 1
      loss += -(z(r, labels[r]) - mx - std::log(total));
    }
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result(Matrix(1, 1, loss), {logits},
                     [logits, prob = std::move(prob), lab, hit_floor](const Matrix& g) {
                       Matrix gz(prob.rows(), prob.cols());
                       const double s = g(0, 0);
                       for (std::size_t r = 0; r < prob.rows(); ++r) {
                         if (hit_floor[r]) continue;
                         for (std::size_t j = 0; j < prob.cols(); ++j) gz(r, j) = s * prob(r, j);
                         gz(r, lab[r]) -= s;
                       }
                       accumulate(logits, gz);
                     });
}

Variable sum(const Variable& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_result(Matrix(1, 1, s), {a}, [a](const Matrix& g) {
    accumulate(a, Matrix(a.rows(), a.cols(), g(0, 0)));
  });
}

}  // namespace webrec::ad
