#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>

#include "pointmoment/checkpoint.hpp"
#include "pointmoment/error.hpp"
#include "pointmoment/model.hpp"
#include "pointmoment/random.hpp"

using namespace pointmoment;

namespace {

PointCloud random_cloud(std::size_t n, Rng& rng) {
  std::vector<Point3> pts(n);
  for (auto& p : pts)
    for (double& v : p) v = rng.uniform(-1.0, 1.0);
  return PointCloud(pts);
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

// Per-point MLP evaluated with plain loops.
std::vector<double> reference_point_feature(const ModelParams& p, const Point3& x) {
  std::vector<double> h(x.begin(), x.end());
  for (const auto& layer : p.encoder()) {
    const Tensor& w = layer.w.value();
    const Tensor& b = layer.b.value();
    std::vector<double> next(w.dim(1));
    for (std::size_t o = 0; o < next.size(); ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < h.size(); ++i) acc += h[i] * w.at(i, o);
      next[o] = std::max(acc, 0.0);
    }
    h = std::move(next);
  }
  return h;
}

}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig c;
  CHECK_NOTHROW(c.validate());
  c.embed_dim = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.point_mlp_widths = {3, 32, 64, 63};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.point_mlp_widths = {2, 64};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("permuting points gives a bitwise identical feature") {
  Rng rng(3);
  const ModelParams p = init_params(EncoderConfig{}, rng);
  for (int t = 0; t < 20; ++t) {
    const PointCloud pc = random_cloud(50 + rng.below(100), rng);
    std::vector<Point3> pts = pc.points();
    rng.shuffle(pts.begin(), pts.end());
    CHECK(bitwise_equal(extract_feature(p, pc), extract_feature(p, PointCloud(pts))));
    const Tensor a = encoder_forward(p, pc).value();
    const Tensor b = encoder_forward(p, PointCloud(pts)).value();
    CHECK(a == b);
  }
}

TEST_CASE("duplicating a point leaves the feature unchanged") {
  Rng rng(4);
  const ModelParams p = init_params(EncoderConfig{}, rng);
  const PointCloud pc = random_cloud(30, rng);
  std::vector<Point3> pts = pc.points();
  pts.push_back(pts[7]);
  CHECK(bitwise_equal(extract_feature(p, pc), extract_feature(p, PointCloud(pts))));
}

TEST_CASE("single-point cloud feature is the per-point MLP output") {
  Rng rng(5);
  const ModelParams p = init_params(EncoderConfig{}, rng);
  const PointCloud pc({{0.3, -0.2, 0.9}});
  const auto feature = extract_feature(p, pc);
  const auto ref = reference_point_feature(p, pc[0]);
  REQUIRE(feature.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(feature[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("batched encoding matches per-cloud encoding") {
  Rng rng(6);
  const ModelParams p = init_params(EncoderConfig{}, rng);
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 5; ++i) clouds.push_back(random_cloud(40, rng));
  const Tensor batch = encode_batch(p, std::span<const PointCloud>(clouds)).value();
  REQUIRE(batch.shape() == Shape{5, 64});
  for (std::size_t b = 0; b < 5; ++b) {
    const Tensor one = encoder_forward(p, clouds[b]).value();
    for (std::size_t k = 0; k < 64; ++k) CHECK(batch.at(b, k) == doctest::Approx(one[k]).epsilon(1e-12));
  }
  // Ragged batches take the per-cloud path.
  clouds.push_back(random_cloud(13, rng));
  CHECK(encode_batch(p, std::span<const PointCloud>(clouds)).shape() == Shape{6, 64});
}

TEST_CASE("projector with zero parameters outputs zeros") {
  Rng rng(7);
  ModelParams p = init_params(EncoderConfig{}, rng);
  for (const auto& l : p.projector()) {
    ad::Var w = l.w, b = l.b;
    w.mutable_value().fill(0.0);
    b.mutable_value().fill(0.0);
  }
  const Tensor feat(Shape{64}, 0.7);
  const Tensor z = projector_forward(p, ad::constant(feat)).value();
  CHECK(z.shape() == Shape{16});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("identity projector layers pass nonnegative features through") {
  EncoderConfig c;
  c.point_mlp_widths = {3, 8, 6};
  c.feature_dim = 6;
  c.projector_hidden = 6;
  c.embed_dim = 6;
  Rng rng(8);
  ModelParams p = init_params(c, rng);
  for (const auto& l : p.projector()) {
    ad::Var w = l.w, b = l.b;
    w.mutable_value().fill(0.0);
    for (std::size_t i = 0; i < 6; ++i) w.mutable_value().at(i, i) = 1.0;
    b.mutable_value().fill(0.0);
  }
  const Tensor feat = Tensor::matrix({{0.0, 0.5, 1.0, 2.0, 0.25, 3.0}, {1, 1, 0, 0, 4, 5}});
  CHECK(projector_forward(p, ad::constant(feat)).value() == feat);
  CHECK_THROWS_AS(projector_forward(p, ad::constant(Tensor(Shape{5}))), ShapeError);
}

TEST_CASE("glorot initialization") {
  Rng a(11), b(11);
  const ModelParams p = init_params(EncoderConfig{}, a);
  const ModelParams q = init_params(EncoderConfig{}, b);
  const auto pn = p.named(), qn = q.named();
  REQUIRE(pn.size() == 10);
  CHECK(pn[0].first == "encoder.layer0.w");
  CHECK(pn[5].first == "encoder.layer2.b");
  CHECK(pn[6].first == "projector.layer0.w");
  CHECK(pn[9].first == "projector.layer1.b");
  for (std::size_t i = 0; i < pn.size(); ++i) CHECK(pn[i].second.value() == qn[i].second.value());
  for (const auto& [name, v] : pn) {
    if (name.back() == 'b') {
      for (double x : v.value().data()) CHECK(x == 0.0);
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(v.shape()[0] + v.shape()[1]));
      for (double x : v.value().data()) CHECK(std::abs(x) <= limit);
    }
  }
  // encoder.layer2.w is 64 x 64; a uniform(-a, a) has std a / sqrt(3).
  const Tensor& w = pn[4].second.value();
  REQUIRE(w.shape() == Shape{64, 64});
  double mean = 0.0, sq = 0.0;
  for (double x : w.data()) mean += x;
  mean /= static_cast<double>(w.size());
  for (double x : w.data()) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / static_cast<double>(w.size()));
  const double analytic = std::sqrt(6.0 / 128.0) / std::sqrt(3.0);
  CHECK(std::abs(sd - analytic) <= 0.2 * analytic);
}

TEST_CASE("params round trip through named tensors") {
  Rng rng(12);
  const ModelParams p = init_params(EncoderConfig{}, rng);
  Checkpoint ckpt;
  ckpt.tensors = p.to_named_tensors();
  const ModelParams q = ModelParams::from_named_tensors(EncoderConfig{}, decode_pmnt(encode_pmnt(ckpt)));
  const auto pn = p.named(), qn = q.named();
  for (std::size_t i = 0; i < pn.size(); ++i) CHECK(pn[i].second.value() == qn[i].second.value());

  Checkpoint missing = ckpt;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(ModelParams::from_named_tensors(EncoderConfig{}, missing), FormatError);
  EncoderConfig other;
  other.embed_dim = 8;
  CHECK_THROWS_AS(ModelParams::from_named_tensors(other, ckpt), FormatError);
}

TEST_CASE("clone is independent and frozen has no gradients") {
  Rng rng(13);
  ModelParams p = init_params(EncoderConfig{}, rng);
  ModelParams c = p.clone();
  c.values()[0]->fill(0.0);
  CHECK_FALSE(p.named()[0].second.value() == c.named()[0].second.value());
  const ModelParams f = p.frozen();
  for (const auto& [name, v] : f.named()) CHECK_FALSE(v.requires_grad());
}
