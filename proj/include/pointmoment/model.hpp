#pragma once

// PointNet-style encoder (shared per-point MLP + max-pool over points) and a
// two-layer projection head.

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointmoment/autodiff.hpp"
#include "pointmoment/checkpoint.hpp"
#include "pointmoment/geometry.hpp"
#include "pointmoment/random.hpp"

namespace pointmoment {

struct EncoderConfig {
  std::vector<std::size_t> point_mlp_widths{3, 32, 64, 64};
  std::size_t feature_dim = 64;
  std::size_t embed_dim = 16;
  std::size_t projector_hidden = 64;

  // Throws ConfigError.
  void validate() const;
};

struct Linear {
  ad::Var w;  // [in, out]
  ad::Var b;  // [out]
};

class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(EncoderConfig config, std::vector<Linear> encoder, std::vector<Linear> projector);

  const EncoderConfig& config() const { return config_; }
  const std::vector<Linear>& encoder() const { return encoder_; }
  const std::vector<Linear>& projector() const { return projector_; }

  // Stable registry order: encoder.layer{i}.{w,b}, then projector.layer{i}.{w,b}.
  std::vector<std::pair<std::string, ad::Var>> named() const;
  std::vector<Tensor*> values();
  std::vector<const Tensor*> grads() const;
  std::vector<Shape> shapes() const;
  void zero_grad();

  // Deep copy with fresh leaf nodes.
  ModelParams clone() const;
  // Copy whose leaves are constants, for inference without gradient records.
  ModelParams frozen() const;

  std::vector<NamedTensor> to_named_tensors() const;
  // Throws FormatError if a tensor is missing or has the wrong shape.
  static ModelParams from_named_tensors(const EncoderConfig& config, const Checkpoint& ckpt);

 private:
  EncoderConfig config_;
  std::vector<Linear> encoder_;
  std::vector<Linear> projector_;
};

// Glorot-uniform weights, zero biases.
ModelParams init_params(const EncoderConfig& config, Rng& rng);

// Global features for a batch of clouds: [B, feature_dim].
ad::Var encode_batch(const ModelParams& params, std::span<const PointCloud> clouds);
ad::Var encode_batch(const ModelParams& params, std::span<const PointCloud* const> clouds);
// Global feature of one cloud: [feature_dim].
ad::Var encoder_forward(const ModelParams& params, const PointCloud& pc);
// linear -> ReLU -> linear. Accepts [feature_dim] or [B, feature_dim].
ad::Var projector_forward(const ModelParams& params, const ad::Var& features);

// Feature vector without recording gradients.
std::vector<double> extract_feature(const ModelParams& params, const PointCloud& pc);

}  // namespace pointmoment
