#include "lcdlab/optim.hpp"

#include <cmath>

#include "lcdlab/error.hpp"

namespace lcdlab {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw Error("adamw: parameters must be leaf tensors");
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0F);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0F);
  }
}

void AdamW::step(float lr) {
  if (!(lr > 0.0F)) throw ConfigError("adamw: learning rate must be positive");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!params_[i].has_grad())
      throw Error("adamw: parameter " + std::to_string(i) + " " + shape_str(params_[i].shape()) + " has no gradient");

  ++step_;
  const auto& o = options_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(o.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(o.beta2), static_cast<double>(step_));
  const float decay = 1.0F - lr * o.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = o.beta1 * m[j] + (1.0F - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0F - o.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

}  // namespace lcdlab
