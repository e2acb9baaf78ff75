#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pointmoment/tensor.hpp"

namespace pointmoment {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
  double base_lr = 1e-3;
};

// First/second moment accumulators, one per parameter tensor.
class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig config, const std::vector<Shape>& param_shapes);

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return t_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  void set_step_count(std::uint64_t t) { t_ = t; }

  // One bias-corrected Adam update. Decoupled weight decay multiplies each
  // parameter by (1 - lr * weight_decay) before the Adam delta is applied.
  // An empty gradient tensor is treated as zero.
  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr);

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t t_ = 0;
};

// Cosine annealing from lr_init (step 0) to lr_min (step == total_steps).
// Steps past the end clamp to lr_min.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr_init, double lr_min);

}  // namespace pointmoment
