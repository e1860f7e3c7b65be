#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every value in the network is a 2-D matrix; batched
// token sequences are stored as (B*T) x D with sample-major row order.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mics::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  bool has_grad() const { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  static Var constant(Matrix value) { return Var(std::move(value), false); }
  static Var parameter(Matrix value) { return Var(std::move(value), true); }
  static Var scalar(double v);

  bool valid() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Zero matrix of the value's shape when no gradient has reached this node.
  Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_op(Matrix, std::initializer_list<Var>, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

// Builds a result node. The backward closure is dropped when no parent needs
// gradients, so inference-only graphs cost nothing beyond the forward pass.
Var make_op(Matrix value, std::initializer_list<Var> parents, std::function<void(Node&)> backward);

// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
void backward(const Var& loss);

// --- elementwise with broadcasting (dims must be equal or 1) ---------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// --- unary elementwise ------------------------------------------------------
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var gelu(const Var& a);
Var square(const Var& a);
Var reciprocal(const Var& a);
Var digamma(const Var& a);
Var lgamma(const Var& a);

// --- linear algebra / reductions -------------------------------------------
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& a);       // 1x1
Var mean(const Var& a);      // 1x1
Var row_sum(const Var& a);   // r x 1
Var log_softmax_rows(const Var& a);
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// --- structural -------------------------------------------------------------
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Index start, Index count);
Var gather_rows(const Var& a, std::span<const Index> rows);
// Mean over consecutive blocks of `block` rows: (n*block) x d -> n x d.
Var segment_mean(const Var& a, Index block);
// Scaled dot-product multi-head attention, independently per sample.
// q: (batch*tq) x d; k, v: (batch*tk) x d.
Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index heads);
// Places `visible` rows at unmasked positions of each length-`mask.size()`
// sequence and `mask_token` (1 x d) at masked positions.
Var fill_masked(const Var& visible, const Var& mask_token, const std::vector<bool>& mask, Index batch);

// --- losses -----------------------------------------------------------------
// Mean over rows of -sum_j target_ij * log_softmax(logits)_ij; target is constant.
Var soft_cross_entropy(const Var& logits, const Matrix& target);
Var cross_entropy(const Var& logits, std::span<const int> labels);
Matrix one_hot(std::span<const int> labels, Index classes);

}  // namespace mics::ad
