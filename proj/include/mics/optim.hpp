#pragma once

// Decoupled-weight-decay Adam and the cosine learning-rate schedule.

#include "mics/autodiff.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace mics::optim {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;
};

class AdamW {
 public:
  AdamW(std::map<std::string, ad::Var> params, AdamWConfig cfg);

  /// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
  void step(double lr);
  void zero_grad();

  const std::map<std::string, ad::Var>& params() const { return params_; }
  std::int64_t steps() const { return t_; }

  /// Moments keyed "m.<name>" / "v.<name>" plus "step" (1x1).
  std::map<std::string, ad::Matrix> state() const;
  void load_state(const std::map<std::string, ad::Matrix>& state);

 private:
  std::map<std::string, ad::Var> params_;
  std::map<std::string, ad::Matrix> m_, v_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
};

/// Cosine decay from lr_max at epoch 0 to lr_min at the final epoch.
double cosine_lr(int epoch, int epochs, double lr_max, double lr_min);

}  // namespace mics::optim
