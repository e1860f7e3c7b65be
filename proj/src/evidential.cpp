#include "mics/evidential.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <cmath>
#include <stdexcept>
#include <string>

namespace mics::evidential {

namespace {

using boost::math::digamma;

void check_one_hot(const Eigen::VectorXd& y, Eigen::Index classes) {
  if (y.size() != classes) throw std::invalid_argument("label vector length differs from class count");
  int ones = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) == 1.0) {
      ++ones;
    } else if (y(i) != 0.0) {
      throw std::invalid_argument("label vector is not one-hot");
    }
  }
  if (ones != 1) throw std::invalid_argument("label vector is not one-hot");
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

DirichletParams::DirichletParams(Eigen::VectorXd lambda) : lambda_(std::move(lambda)) {
  if (lambda_.size() == 0) throw std::invalid_argument("Dirichlet parameters need at least one class");
  for (Eigen::Index i = 0; i < lambda_.size(); ++i) {
    if (!std::isfinite(lambda_(i)) || lambda_(i) < 1.0) {
      throw std::invalid_argument("concentration " + std::to_string(i) + " is below 1 or not finite");
    }
  }
}

EvidentialOpinion EvidentialOpinion::vacuous(Eigen::Index classes) {
  return {Eigen::VectorXd::Zero(classes), 1.0};
}

DirichletParams logits_to_concentration(const Eigen::VectorXd& logits) {
  Eigen::VectorXd lambda(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits(i))) throw std::invalid_argument("non-finite logit at index " + std::to_string(i));
    lambda(i) = softplus(logits(i)) + 1.0;
  }
  return DirichletParams(std::move(lambda));
}

EvidentialOpinion opinion(const DirichletParams& params) {
  const double s = params.strength();
  EvidentialOpinion op;
  op.belief = (params.lambda().array() - 1.0) / s;
  op.uncertainty = static_cast<double>(params.classes()) / s;
  return op;
}

EvidentialOpinion combine(const EvidentialOpinion& a, const EvidentialOpinion& b) {
  if (a.classes() != b.classes()) throw std::invalid_argument("combine: opinions have different class counts");
  // sum_{i != j} a_i b_j
  const double conflict = a.belief.sum() * b.belief.sum() - a.belief.dot(b.belief);
  const double norm = 1.0 - conflict;
  if (norm <= 1e-15) throw std::domain_error("combine: total conflict between opinions");
  EvidentialOpinion out;
  out.belief = (a.belief.cwiseProduct(b.belief) + a.belief * b.uncertainty + b.belief * a.uncertainty) / norm;
  out.uncertainty = a.uncertainty * b.uncertainty / norm;
  return out;
}

DirichletParams opinion_to_concentration(const EvidentialOpinion& op, Eigen::Index classes) {
  if (op.classes() != classes) throw std::invalid_argument("opinion_to_concentration: class count mismatch");
  if (!(op.uncertainty > 0.0)) throw std::invalid_argument("opinion_to_concentration: uncertainty must be positive");
  const double s = static_cast<double>(classes) / op.uncertainty;
  return DirichletParams((op.belief * s).array() + 1.0);
}

double evidential_nll(const DirichletParams& params, const Eigen::VectorXd& y) {
  check_one_hot(y, params.classes());
  const double psi_s = digamma(params.strength());
  double loss = 0.0;
  for (Eigen::Index c = 0; c < y.size(); ++c) {
    if (y(c) != 0.0) loss += y(c) * (psi_s - digamma(params.lambda()(c)));
  }
  return loss;
}

double kl_regularizer(const DirichletParams& params, const Eigen::VectorXd& y, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw std::invalid_argument("kl_regularizer: theta must lie in [0, 1]");
  check_one_hot(y, params.classes());
  const Eigen::VectorXd alpha = y.array() + (1.0 - y.array()) * params.lambda().array();
  const double s = alpha.sum();
  const double c = static_cast<double>(alpha.size());
  double kl = std::lgamma(s) - std::lgamma(c);
  const double psi_s = digamma(s);
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    kl += -std::lgamma(alpha(i)) + (alpha(i) - 1.0) * (digamma(alpha(i)) - psi_s);
  }
  return theta * kl;
}

LossBundle evidential_loss_bundle(const Eigen::VectorXd& logits_w, const Eigen::VectorXd& logits_n,
                                  const Eigen::VectorXd& y, double theta) {
  const DirichletParams pw = logits_to_concentration(logits_w);
  const DirichletParams pn = logits_to_concentration(logits_n);
  const DirichletParams pf = opinion_to_concentration(combine(opinion(pw), opinion(pn)), pw.classes());
  LossBundle out;
  out.wn = evidential_nll(pw, y) + evidential_nll(pn, y) + kl_regularizer(pw, y, theta) + kl_regularizer(pn, y, theta);
  out.fuse = evidential_nll(pf, y) + kl_regularizer(pf, y, theta);
  return out;
}

Prediction predict(const EvidentialOpinion& fused, Eigen::Index classes) {
  const DirichletParams p = opinion_to_concentration(fused, classes);
  Prediction out;
  out.probabilities = p.lambda() / p.strength();
  Eigen::Index best = 0;
  out.probabilities.maxCoeff(&best);
  out.label = static_cast<int>(best);
  out.uncertainty = fused.uncertainty;
  return out;
}

EvidentialOpinion fuse_logits(const Eigen::VectorXd& logits_w, const Eigen::VectorXd& logits_n) {
  return combine(opinion(logits_to_concentration(logits_w)), opinion(logits_to_concentration(logits_n)));
}

namespace batched {

using ad::Var;

Var concentration(const Var& logits) { return add_scalar(softplus(logits), 1.0); }

Var nll(const Var& lambda, const ad::Matrix& y) {
  Var psi_s = digamma(row_sum(lambda));
  Var picked = row_sum(mul(digamma(lambda), Var::constant(y)));
  return mean(psi_s - picked);
}

Var kl(const Var& lambda, const ad::Matrix& y, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw std::invalid_argument("kl: theta must lie in [0, 1]");
  const double c = static_cast<double>(lambda.cols());
  Var alpha = add(Var::constant(y), mul(lambda, Var::constant((1.0 - y.array()).matrix())));
  Var s = row_sum(alpha);
  Var per_row = add_scalar(lgamma(s), -std::lgamma(c));
  per_row = per_row - row_sum(lgamma(alpha));
  per_row = per_row + row_sum(mul(add_scalar(alpha, -1.0), sub(digamma(alpha), digamma(s))));
  return scale(mean(per_row), theta);
}

Var fused_concentration(const Var& lambda_w, const Var& lambda_n) {
  const double c = static_cast<double>(lambda_w.cols());
  Var sw = row_sum(lambda_w);
  Var sn = row_sum(lambda_n);
  Var bw = div(add_scalar(lambda_w, -1.0), sw);
  Var bn = div(add_scalar(lambda_n, -1.0), sn);
  Var uw = scale(reciprocal(sw), c);
  Var un = scale(reciprocal(sn), c);
  Var conflict = mul(row_sum(bw), row_sum(bn)) - row_sum(mul(bw, bn));
  Var norm = add_scalar(-conflict, 1.0);
  Var belief = div(add(add(mul(bw, bn), mul(bw, un)), mul(bn, uw)), norm);
  Var u = div(mul(uw, un), norm);
  // S_fused = C / u, lambda = belief * S + 1
  return add_scalar(div(scale(belief, c), u), 1.0);
}

Losses loss_bundle(const Var& logits_w, const Var& logits_n, std::span<const int> labels, double theta) {
  const ad::Matrix y = ad::one_hot(labels, logits_w.cols());
  Var lw = concentration(logits_w);
  Var ln = concentration(logits_n);
  Var lf = fused_concentration(lw, ln);
  Losses out;
  out.wn = add(add(nll(lw, y), nll(ln, y)), add(kl(lw, y, theta), kl(ln, y, theta)));
  out.fuse = add(nll(lf, y), kl(lf, y, theta));
  return out;
}

}  // namespace batched

}  // namespace mics::evidential
