#include "mics/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mics::optim {

AdamW::AdamW(std::map<std::string, ad::Var> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, p] : params_) {
    m_[name] = ad::Matrix::Zero(p.rows(), p.cols());
    v_[name] = ad::Matrix::Zero(p.rows(), p.cols());
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params_) {
    ad::Var param = p;
    ad::Matrix& value = param.mutable_value();
    ad::Matrix& m = m_[name];
    ad::Matrix& v = v_[name];
    if (p.node()->has_grad()) {
      const ad::Matrix& g = p.node()->grad;
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    } else {
      m *= cfg_.beta1;
      v *= cfg_.beta2;
    }
    value *= 1.0 - lr * cfg_.weight_decay;
    value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.node()->grad.resize(0, 0);
}

std::map<std::string, ad::Matrix> AdamW::state() const {
  std::map<std::string, ad::Matrix> out;
  for (const auto& [name, m] : m_) out["m." + name] = m;
  for (const auto& [name, v] : v_) out["v." + name] = v;
  out["step"] = ad::Matrix::Constant(1, 1, static_cast<double>(t_));
  return out;
}

void AdamW::load_state(const std::map<std::string, ad::Matrix>& state) {
  for (auto& [name, m] : m_) {
    const auto mi = state.find("m." + name);
    const auto vi = state.find("v." + name);
    if (mi == state.end() || vi == state.end()) throw std::invalid_argument("optimizer state lacks moments for " + name);
    if (mi->second.rows() != m.rows() || mi->second.cols() != m.cols()) throw std::invalid_argument("optimizer state shape mismatch for " + name);
    m = mi->second;
    v_[name] = vi->second;
  }
  const auto si = state.find("step");
  t_ = si == state.end() ? 0 : static_cast<std::int64_t>(si->second(0, 0));
}

double cosine_lr(int epoch, int epochs, double lr_max, double lr_min) {
  if (epochs <= 1) return lr_max;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace mics::optim
