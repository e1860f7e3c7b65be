#include "mics/autodiff.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace mics::ad {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m), false);
}

Matrix Var::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on a non-scalar value");
  return node_->value(0, 0);
}

Var make_op(Matrix value, std::initializer_list<Var> parents, std::function<void(Node&)> backward) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    for (const auto& p : parents) out.node_->parents.push_back(p.node());
    out.node_->backward = std::move(backward);
  }
  return out;
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw std::logic_error("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; recursion depth would track graph depth.
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

namespace {

void check_broadcast(const Matrix& a, const Matrix& b, const char* op) {
  auto ok = [](Index x, Index y) { return x == y || x == 1 || y == 1; };
  if (!ok(a.rows(), b.rows()) || !ok(a.cols(), b.cols())) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1) return m.replicate(rows, 1);
  return m.replicate(1, cols);
}

Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

template <typename Fwd, typename Bwd>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, Bwd bwd) {
  check_broadcast(a.value(), b.value(), name);
  const Index r = std::max(a.rows(), b.rows());
  const Index c = std::max(a.cols(), b.cols());
  Matrix ea = expand(a.value(), r, c);
  Matrix eb = expand(b.value(), r, c);
  Matrix out = fwd(ea, eb);
  auto pa = a.node();
  auto pb = b.node();
  return make_op(std::move(out), {a, b}, [pa, pb, ea = std::move(ea), eb = std::move(eb), bwd](Node& self) {
    Matrix ga, gb;
    bwd(self.grad, ea, eb, self.value, ga, gb);
    if (pa->requires_grad) pa->accumulate(reduce_to(ga, pa->value.rows(), pa->value.cols()));
    if (pb->requires_grad) pb->accumulate(reduce_to(gb, pb->value.rows(), pb->value.cols()));
  });
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Matrix out = a.value().unaryExpr(fwd);
  auto pa = a.node();
  return make_op(std::move(out), {a}, [pa, deriv](Node& self) {
    Matrix d(pa->value.rows(), pa->value.cols());
    for (Index i = 0; i < d.size(); ++i) d.data()[i] = deriv(pa->value.data()[i], self.value.data()[i]);
    pa->accumulate(self.grad.cwiseProduct(d));
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&, Matrix& ga, Matrix& gb) {
        ga = g;
        gb = g;
      });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&, const Matrix&, Matrix& ga, Matrix& gb) {
        ga = g;
        gb = -g;
      });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix& x, const Matrix& y, const Matrix&, Matrix& ga, Matrix& gb) {
        ga = g.cwiseProduct(y);
        gb = g.cwiseProduct(x);
      });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div", [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y, const Matrix& out, Matrix& ga, Matrix& gb) {
        ga = g.cwiseQuotient(y);
        gb = -g.cwiseProduct(out).cwiseQuotient(y);
      });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator-(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  auto pa = a.node();
  return make_op(a.value() * s, {a}, [pa, s](Node& self) { pa->accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  auto pa = a.node();
  return make_op(a.value().array() + s, {a}, [pa](Node& self) { pa->accumulate(self.grad); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var reciprocal(const Var& a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var digamma(const Var& a) {
  return unary(
      a, [](double x) { return boost::math::digamma(x); }, [](double x, double) { return boost::math::trigamma(x); });
}

Var lgamma(const Var& a) {
  return unary(a, [](double x) { return std::lgamma(x); }, [](double x, double) { return boost::math::digamma(x); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_op(a.value() * b.value(), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  auto pa = a.node();
  return make_op(a.value().transpose(), {a}, [pa](Node& self) { pa->accumulate(self.grad.transpose()); });
}

Var sum(const Var& a) {
  auto pa = a.node();
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [pa](Node& self) {
    pa->accumulate(Matrix::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean of an empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
  auto pa = a.node();
  return make_op(a.value().rowwise().sum(), {a},
                 [pa](Node& self) { pa->accumulate(self.grad.replicate(1, pa->value.cols())); });
}

Var log_softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    const double lse = mx + std::log((out.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  auto pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& self) {
    Matrix p = self.value.array().exp();
    Matrix g = self.grad - (p.array().colwise() * self.grad.rowwise().sum().array()).matrix();
    pa->accumulate(g);
  });
}

Var softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    out.row(i).array() = (out.row(i).array() - out.row(i).maxCoeff()).exp();
    out.row(i) /= out.row(i).sum();
  }
  auto pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& self) {
    const Matrix& y = self.value;
    Matrix dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = y.cwiseProduct(self.grad - dot.replicate(1, y.cols()));
    pa->accumulate(g);
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm_rows: gamma/beta must be 1 x " + std::to_string(d));
  }
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return make_op(std::move(out), {x, gamma, beta},
                 [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Matrix& dy = self.grad;
                   if (pg->requires_grad) pg->accumulate(dy.cwiseProduct(xhat).colwise().sum());
                   if (pb->requires_grad) pb->accumulate(dy.colwise().sum());
                   if (px->requires_grad) {
                     const double dd = static_cast<double>(xhat.cols());
                     Matrix dxhat = dy.array().rowwise() * pg->value.row(0).array();
                     Matrix dx(xhat.rows(), xhat.cols());
                     for (Index i = 0; i < xhat.rows(); ++i) {
                       const double s1 = dxhat.row(i).sum();
                       const double s2 = dxhat.row(i).dot(xhat.row(i));
                       dx.row(i) = (inv_std(i) / dd) * (dd * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
                     }
                     px->accumulate(dx);
                   }
                 });
}

Var l2_normalize_rows(const Var& x, double eps) {
  Eigen::VectorXd norms = x.value().rowwise().norm().cwiseMax(eps);
  Matrix out = x.value().array().colwise() / norms.array();
  auto px = x.node();
  return make_op(std::move(out), {x}, [px, norms = std::move(norms)](Node& self) {
    const Matrix& y = self.value;
    Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = (self.grad - (y.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array();
    px->accumulate(g);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  auto pa = a.node();
  auto pb = b.node();
  const Index ca = a.cols();
  return make_op(std::move(out), {a, b}, [pa, pb, ca](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad.leftCols(ca));
    if (pb->requires_grad) pb->accumulate(self.grad.rightCols(self.grad.cols() - ca));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  std::vector<std::shared_ptr<Node>> nodes;
  bool any = false;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    nodes.push_back(p.node());
    any = any || p.requires_grad();
  }
  Var result = make_op(std::move(out), {}, {});
  if (any) {
    auto& n = *result.node();
    n.requires_grad = true;
    n.parents = nodes;
    n.backward = [nodes](Node& self) {
      Index offset = 0;
      for (const auto& p : nodes) {
        const Index r = p->value.rows();
        if (p->requires_grad) p->accumulate(self.grad.middleRows(offset, r));
        offset += r;
      }
    };
  }
  return result;
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows: range outside matrix");
  auto pa = a.node();
  return make_op(a.value().middleRows(start, count), {a}, [pa, start, count](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    g.middleRows(start, count) = self.grad;
    pa->accumulate(g);
  });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows: index outside matrix");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  auto pa = a.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {a}, [pa, idx = std::move(idx)](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    pa->accumulate(g);
  });
}

Var segment_mean(const Var& a, Index block) {
  if (block <= 0 || a.rows() % block != 0) throw std::invalid_argument("segment_mean: rows not divisible by block");
  const Index n = a.rows() / block;
  Matrix out(n, a.cols());
  for (Index i = 0; i < n; ++i) out.row(i) = a.value().middleRows(i * block, block).colwise().mean();
  auto pa = a.node();
  return make_op(std::move(out), {a}, [pa, block](Node& self) {
    Matrix g(pa->value.rows(), pa->value.cols());
    const double inv = 1.0 / static_cast<double>(block);
    for (Index i = 0; i < self.grad.rows(); ++i) g.middleRows(i * block, block) = self.grad.row(i).replicate(block, 1) * inv;
    pa->accumulate(g);
  });
}

Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index heads) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw std::invalid_argument("attention: q/k/v widths differ");
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (k.rows() != v.rows()) throw std::invalid_argument("attention: k/v lengths differ");
  if (batch == 0) {
    if (q.rows() != 0 || k.rows() != 0) throw std::invalid_argument("attention: empty batch with non-empty inputs");
    return make_op(Matrix(0, d), {q, k, v}, [](Node&) {});
  }
  if (q.rows() % batch != 0 || k.rows() % batch != 0) throw std::invalid_argument("attention: rows not divisible by batch");
  const Index tq = q.rows() / batch;
  const Index tk = k.rows() / batch;
  const Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[b*heads + h] : tq x tk
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  Matrix out(q.rows(), d);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(b * tq, h * dh, tq, dh);
      auto kb = k.value().block(b * tk, h * dh, tk, dh);
      auto vb = v.value().block(b * tk, h * dh, tk, dh);
      Matrix s = (qb * kb.transpose()) * sc;
      for (Index i = 0; i < tq; ++i) {
        s.row(i).array() = (s.row(i).array() - s.row(i).maxCoeff()).exp();
        s.row(i) /= s.row(i).sum();
      }
      out.block(b * tq, h * dh, tq, dh) = s * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  auto pq = q.node();
  auto pk = k.node();
  auto pv = v.node();
  return make_op(std::move(out), {q, k, v},
                 [pq, pk, pv, probs = std::move(probs), batch, heads, tq, tk, dh, sc](Node& self) {
                   Matrix gq = Matrix::Zero(pq->value.rows(), pq->value.cols());
                   Matrix gk = Matrix::Zero(pk->value.rows(), pk->value.cols());
                   Matrix gv = Matrix::Zero(pv->value.rows(), pv->value.cols());
                   for (Index b = 0; b < batch; ++b) {
                     for (Index h = 0; h < heads; ++h) {
                       const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
                       auto qb = pq->value.block(b * tq, h * dh, tq, dh);
                       auto kb = pk->value.block(b * tk, h * dh, tk, dh);
                       auto vb = pv->value.block(b * tk, h * dh, tk, dh);
                       auto go = self.grad.block(b * tq, h * dh, tq, dh);
                       gv.block(b * tk, h * dh, tk, dh) = p.transpose() * go;
                       Matrix dp = go * vb.transpose();
                       Matrix dots = dp.cwiseProduct(p).rowwise().sum();
                       Matrix ds = p.cwiseProduct(dp - dots.replicate(1, tk)) * sc;
                       gq.block(b * tq, h * dh, tq, dh) = ds * kb;
                       gk.block(b * tk, h * dh, tk, dh) = ds.transpose() * qb;
                     }
                   }
                   if (pq->requires_grad) pq->accumulate(gq);
                   if (pk->requires_grad) pk->accumulate(gk);
                   if (pv->requires_grad) pv->accumulate(gv);
                 });
}

Var fill_masked(const Var& visible, const Var& mask_token, const std::vector<bool>& mask, Index batch) {
  const Index t = static_cast<Index>(mask.size());
  Index tv = 0;
  for (bool m : mask) tv += m ? 0 : 1;
  if (visible.rows() != batch * tv) {
    throw std::invalid_argument("fill_masked: expected " + std::to_string(batch * tv) + " visible rows, got " +
                                std::to_string(visible.rows()));
  }
  if (mask_token.rows() != 1 || mask_token.cols() != visible.cols()) {
    throw std::invalid_argument("fill_masked: mask token must be 1 x width");
  }
  Matrix out(batch * t, visible.cols());
  for (Index b = 0; b < batch; ++b) {
    Index vi = 0;
    for (Index i = 0; i < t; ++i) {
      out.row(b * t + i) = mask[static_cast<std::size_t>(i)] ? mask_token.value().row(0) : visible.value().row(b * tv + vi++);
    }
  }
  auto pv = visible.node();
  auto pm = mask_token.node();
  return make_op(std::move(out), {visible, mask_token}, [pv, pm, mask, batch, t, tv](Node& self) {
    Matrix gv(batch * tv, self.grad.cols());
    Matrix gm = Matrix::Zero(1, self.grad.cols());
    for (Index b = 0; b < batch; ++b) {
      Index vi = 0;
      for (Index i = 0; i < t; ++i) {
        if (mask[static_cast<std::size_t>(i)]) {
          gm += self.grad.row(b * t + i);
        } else {
          gv.row(b * tv + vi++) = self.grad.row(b * t + i);
        }
      }
    }
    if (pv->requires_grad) pv->accumulate(gv);
    if (pm->requires_grad) pm->accumulate(gm);
  });
}

Var soft_cross_entropy(const Var& logits, const Matrix& target) {
  if (target.rows() != logits.rows() || target.cols() != logits.cols()) {
    throw std::invalid_argument("soft_cross_entropy: target shape differs from logits");
  }
  if (logits.rows() == 0) throw std::invalid_argument("soft_cross_entropy: empty batch");
  Var ls = log_softmax_rows(logits);
  return scale(sum(mul(ls, Var::constant(target))), -1.0 / static_cast<double>(logits.rows()));
}

Matrix one_hot(std::span<const int> labels, Index classes) {
  Matrix y = Matrix::Zero(static_cast<Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw std::out_of_range("one_hot: label outside [0, C)");
    y(static_cast<Index>(i), labels[i]) = 1.0;
  }
  return y;
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) throw std::invalid_argument("cross_entropy: label count differs");
  return soft_cross_entropy(logits, one_hot(labels, logits.cols()));
}

}  // namespace mics::ad
