#include "pointmoment/optim.hpp"

#include <cmath>
#include <numbers>

#include "pointmoment/error.hpp"

namespace pointmoment {

AdamState::AdamState(AdamConfig config, const std::vector<Shape>& param_shapes) : config_(config) {
  m_.reserve(param_shapes.size());
  v_.reserve(param_shapes.size());
  for (const auto& s : param_shapes) {
    m_.emplace_back(s);
    v_.emplace_back(s);
  }
}

void AdamState::step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ShapeError("adam: expected " + std::to_string(m_.size()) + " parameters, got " +
                     std::to_string(params.size()) + " params / " + std::to_string(grads.size()) + " grads");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->shape() != m_[k].shape() || (!grads[k]->empty() && grads[k]->shape() != m_[k].shape())) {
      throw ShapeError("adam: shape mismatch for parameter " + std::to_string(k));
    }
  }

  ++t_;
  const auto& c = config_;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
  const double decay = 1.0 - lr * c.weight_decay;

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    const bool has_grad = !g.empty();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      if (c.weight_decay != 0.0) p[i] *= decay;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr_init, double lr_min) {
  if (total_steps == 0 || step >= total_steps) return step == 0 && total_steps == 0 ? lr_init : lr_min;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace pointmoment
