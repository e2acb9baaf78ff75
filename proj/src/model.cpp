#include "pointmoment/model.hpp"

#include <cmath>

#include "pointmoment/error.hpp"

namespace pointmoment {
namespace {

ad::Var affine(const ad::Var& x, const Linear& layer) {
  return ad::linear(x, layer.w, layer.b);
}

Linear glorot_layer(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(Shape{fan_in, fan_out});
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return {ad::parameter(std::move(w)), ad::parameter(Tensor(Shape{fan_out}))};
}

Linear as_constants(const Linear& l) {
  return {ad::constant(l.w.value()), ad::constant(l.b.value())};
}

ad::Var point_mlp(const std::vector<Linear>& layers, ad::Var x) {
  for (const auto& layer : layers) x = ad::relu(affine(x, layer));
  return x;
}

}  // namespace

void EncoderConfig::validate() const {
  if (point_mlp_widths.size() < 2) throw ConfigError("encoder.point_mlp_widths needs at least two widths");
  if (point_mlp_widths.front() != 3) throw ConfigError("encoder.point_mlp_widths must start with 3 (xyz input)");
  for (std::size_t w : point_mlp_widths)
    if (w < 1) throw ConfigError("encoder widths must be >= 1");
  if (point_mlp_widths.back() != feature_dim) {
    throw ConfigError("encoder.point_mlp_widths must end with encoder.feature_dim");
  }
  if (projector_hidden < 1) throw ConfigError("encoder.projector_hidden must be >= 1");
  if (embed_dim < 2) throw ConfigError("encoder.embed_dim must be >= 2");
}

ModelParams::ModelParams(EncoderConfig config, std::vector<Linear> encoder, std::vector<Linear> projector)
    : config_(std::move(config)), encoder_(std::move(encoder)), projector_(std::move(projector)) {}

std::vector<std::pair<std::string, ad::Var>> ModelParams::named() const {
  std::vector<std::pair<std::string, ad::Var>> out;
  auto add = [&out](const std::string& prefix, const std::vector<Linear>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      out.emplace_back(base + ".w", layers[i].w);
      out.emplace_back(base + ".b", layers[i].b);
    }
  };
  add("encoder", encoder_);
  add("projector", projector_);
  return out;
}

std::vector<Tensor*> ModelParams::values() {
  std::vector<Tensor*> out;
  for (auto& [name, v] : named()) out.push_back(&v.mutable_value());
  return out;
}

std::vector<const Tensor*> ModelParams::grads() const {
  std::vector<const Tensor*> out;
  for (const auto& [name, v] : named()) out.push_back(&v.grad());
  return out;
}

std::vector<Shape> ModelParams::shapes() const {
  std::vector<Shape> out;
  for (const auto& [name, v] : named()) out.push_back(v.shape());
  return out;
}

void ModelParams::zero_grad() {
  for (auto& [name, v] : named()) v.zero_grad();
}

ModelParams ModelParams::clone() const {
  auto copy = [](const std::vector<Linear>& layers) {
    std::vector<Linear> out;
    for (const auto& l : layers) out.push_back({ad::parameter(l.w.value()), ad::parameter(l.b.value())});
    return out;
  };
  return ModelParams(config_, copy(encoder_), copy(projector_));
}

ModelParams ModelParams::frozen() const {
  auto copy = [](const std::vector<Linear>& layers) {
    std::vector<Linear> out;
    for (const auto& l : layers) out.push_back(as_constants(l));
    return out;
  };
  return ModelParams(config_, copy(encoder_), copy(projector_));
}

std::vector<NamedTensor> ModelParams::to_named_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& [name, v] : named()) out.push_back({name, v.value()});
  return out;
}

ModelParams ModelParams::from_named_tensors(const EncoderConfig& config, const Checkpoint& ckpt) {
  config.validate();
  Rng dummy(0);
  ModelParams params = init_params(config, dummy);
  for (auto& [name, v] : params.named()) {
    const Tensor& t = ckpt.tensor(name);
    if (t.shape() != v.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                        shape_string(v.shape()));
    }
    if (!t.all_finite()) throw FormatError("checkpoint tensor '" + name + "' is not finite");
    v.mutable_value() = t;
  }
  return params;
}

ModelParams init_params(const EncoderConfig& config, Rng& rng) {
  config.validate();
  std::vector<Linear> encoder, projector;
  const auto& w = config.point_mlp_widths;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) encoder.push_back(glorot_layer(w[i], w[i + 1], rng));
  projector.push_back(glorot_layer(config.feature_dim, config.projector_hidden, rng));
  projector.push_back(glorot_layer(config.projector_hidden, config.embed_dim, rng));
  return ModelParams(config, std::move(encoder), std::move(projector));
}

ad::Var encode_batch(const ModelParams& params, std::span<const PointCloud* const> clouds) {
  if (clouds.empty()) throw ShapeError("encode_batch: empty batch");
  const std::size_t n = clouds.front()->size();
  bool uniform = true;
  for (const PointCloud* pc : clouds) uniform &= pc->size() == n;

  if (uniform) {
    Tensor x(Shape{clouds.size() * n, 3});
    for (std::size_t b = 0; b < clouds.size(); ++b) {
      const auto& pts = clouds[b]->points();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < 3; ++k) x.at(b * n + i, k) = pts[i][k];
    }
    ad::Var h = point_mlp(params.encoder(), ad::constant(std::move(x)));
    const std::size_t f = h.shape()[1];
    return ad::max_over_axis(ad::reshape(h, Shape{clouds.size(), n, f}), 1);
  }

  std::vector<ad::Var> rows;
  for (const PointCloud* pc : clouds) {
    ad::Var h = point_mlp(params.encoder(), ad::constant(pc->to_tensor()));
    ad::Var g = ad::max_over_axis(h, 0);
    rows.push_back(ad::reshape(g, Shape{1, g.shape()[0]}));
  }
  return ad::concat_rows(rows);
}

ad::Var encode_batch(const ModelParams& params, std::span<const PointCloud> clouds) {
  std::vector<const PointCloud*> ptrs;
  for (const auto& pc : clouds) ptrs.push_back(&pc);
  return encode_batch(params, std::span<const PointCloud* const>(ptrs));
}

ad::Var encoder_forward(const ModelParams& params, const PointCloud& pc) {
  ad::Var h = point_mlp(params.encoder(), ad::constant(pc.to_tensor()));
  return ad::max_over_axis(h, 0);
}

ad::Var projector_forward(const ModelParams& params, const ad::Var& features) {
  const auto& proj = params.projector();
  const bool single = features.value().rank() == 1;
  ad::Var x = single ? ad::reshape(features, Shape{1, features.shape()[0]}) : features;
  if (x.value().rank() != 2 || x.shape()[1] != params.config().feature_dim) {
    throw ShapeError("projector_forward: expected feature width " + std::to_string(params.config().feature_dim) +
                     ", got " + shape_string(features.shape()));
  }
  ad::Var z = affine(ad::relu(affine(x, proj[0])), proj[1]);
  return single ? ad::reshape(z, Shape{z.shape()[1]}) : z;
}

std::vector<double> extract_feature(const ModelParams& params, const PointCloud& pc) {
  std::vector<Linear> frozen;
  for (const auto& l : params.encoder()) frozen.push_back(as_constants(l));
  ad::Var h = point_mlp(frozen, ad::constant(pc.to_tensor()));
  const ad::Var g = ad::max_over_axis(h, 0);
  return {g.value().data().begin(), g.value().data().end()};
}

}  // namespace pointmoment
