#pragma once

// Dirichlet-based evidential calculus: concentration parameters, subjective
// opinions (belief masses + uncertainty), the reduced Dempster combination
// of two opinions, and the evidential training losses.

#include "mics/autodiff.hpp"

#include <Eigen/Dense>

#include <span>

namespace mics::evidential {

/// Dirichlet concentration parameters. Every component is >= 1, so the
/// strength is at least the number of classes.
class DirichletParams {
 public:
  explicit DirichletParams(Eigen::VectorXd lambda);

  const Eigen::VectorXd& lambda() const { return lambda_; }
  double strength() const { return lambda_.sum(); }
  Eigen::Index classes() const { return lambda_.size(); }

 private:
  Eigen::VectorXd lambda_;
};

struct EvidentialOpinion {
  Eigen::VectorXd belief;
  double uncertainty = 1.0;

  Eigen::Index classes() const { return belief.size(); }
  static EvidentialOpinion vacuous(Eigen::Index classes);
};

/// evidence = softplus(logit), lambda = evidence + 1.
DirichletParams logits_to_concentration(const Eigen::VectorXd& logits);

/// belief_c = (lambda_c - 1) / S and uncertainty = C / S.
EvidentialOpinion opinion(const DirichletParams& params);

/// Reduced Dempster rule for two opinions over the same C singletons.
/// Throws std::domain_error under total conflict.
EvidentialOpinion combine(const EvidentialOpinion& a, const EvidentialOpinion& b);

/// Inverse of opinion(): S = C / uncertainty, lambda_c = belief_c * S + 1.
DirichletParams opinion_to_concentration(const EvidentialOpinion& op, Eigen::Index classes);

/// Expected cross-entropy under Dir(lambda): sum_c y_c (psi(S) - psi(lambda_c)).
double evidential_nll(const DirichletParams& params, const Eigen::VectorXd& y);

/// theta * KL(Dir(y + (1 - y) * lambda) || Dir(1, ..., 1)).
double kl_regularizer(const DirichletParams& params, const Eigen::VectorXd& y, double theta);

struct LossBundle {
  double wn = 0.0;    // per-modality terms
  double fuse = 0.0;  // terms on the Dempster-combined opinion
};

LossBundle evidential_loss_bundle(const Eigen::VectorXd& logits_w, const Eigen::VectorXd& logits_n,
                                  const Eigen::VectorXd& y, double theta);

struct Prediction {
  int label = 0;
  Eigen::VectorXd probabilities;
  double uncertainty = 1.0;
};

/// Decision rule on a fused opinion: probabilities are the Dirichlet mean.
Prediction predict(const EvidentialOpinion& fused, Eigen::Index classes);

/// Combined opinion of two per-modality logit vectors.
EvidentialOpinion fuse_logits(const Eigen::VectorXd& logits_w, const Eigen::VectorXd& logits_n);

// Batched, differentiable versions used during fine-tuning. Each returns the
// batch mean of the per-sample quantity.
namespace batched {

ad::Var concentration(const ad::Var& logits);
ad::Var nll(const ad::Var& lambda, const ad::Matrix& y);
ad::Var kl(const ad::Var& lambda, const ad::Matrix& y, double theta);
// Combined concentration of two per-modality concentration batches.
ad::Var fused_concentration(const ad::Var& lambda_w, const ad::Var& lambda_n);

struct Losses {
  ad::Var wn;
  ad::Var fuse;
};
Losses loss_bundle(const ad::Var& logits_w, const ad::Var& logits_n, std::span<const int> labels, double theta);

}  // namespace batched

}  // namespace mics::evidential
