#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "pointmoment/autodiff.hpp"
#include "pointmoment/checkpoint.hpp"
#include "pointmoment/error.hpp"
#include "pointmoment/gradcheck.hpp"
#include "pointmoment/optim.hpp"
#include "pointmoment/random.hpp"
#include "pointmoment/tensor.hpp"

using namespace pointmoment;

TEST_CASE("tensor construction and shape checks") {
  const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(m.shape() == Shape{2, 3});
  CHECK(m.at(1, 2) == 6.0);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), ShapeError);
  CHECK_THROWS_AS(m.reshaped({4}), ShapeError);
  CHECK(m.reshaped({3, 2}).at(2, 1) == 6.0);
  CHECK_THROWS_AS(m.item(), ShapeError);
}

TEST_CASE("all_finite detects nan and inf") {
  Tensor t(Shape{5}, 1.0);
  CHECK(t.all_finite());
  t[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  t[3] = -std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("matmul by hand") {
  const auto a = ad::constant(Tensor::matrix({{1, 2}, {3, 4}}));
  const auto b = ad::constant(Tensor::matrix({{1}, {1}}));
  CHECK(ad::matmul(a, b).value() == Tensor::matrix({{3}, {7}}));
}

TEST_CASE("relu gradient at exactly zero is zero") {
  auto x = ad::parameter(Tensor::vector({-1.0, 0.0, 2.0}));
  ad::backward(ad::sum(ad::relu(x)));
  CHECK(x.grad() == Tensor::vector({0.0, 0.0, 1.0}));
}

TEST_CASE("backward of sum of squares and mean") {
  auto x = ad::parameter(Tensor::vector({1, 2, 3}));
  ad::backward(ad::sum(ad::square(x)));
  CHECK(x.grad() == Tensor::vector({2, 4, 6}));

  auto y = ad::parameter(Tensor::vector({5, -1, 2, 7}));
  ad::backward(ad::mean(y));
  CHECK(y.grad() == Tensor::vector({0.25, 0.25, 0.25, 0.25}));
}

TEST_CASE("shared subexpression accumulates") {
  auto x = ad::parameter(Tensor::vector({1.5, -2.0}));
  ad::backward(ad::sum(ad::mul(x, x)));
  CHECK(x.grad() == Tensor::vector({3.0, -4.0}));
}

TEST_CASE("backward preconditions") {
  auto x = ad::parameter(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(ad::backward(ad::square(x)), UsageError);
  const auto loss = ad::sum(x);
  ad::backward(loss);
  CHECK_THROWS_AS(ad::backward(loss), UsageError);
}

TEST_CASE("shape mismatches fail at graph construction") {
  const auto a = ad::constant(Tensor(Shape{2, 3}));
  const auto b = ad::constant(Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::broadcast(a, {4, 3}), ShapeError);
  CHECK_THROWS_AS(ad::diagonal(a), ShapeError);
}

TEST_CASE("non-finite forward values are rejected") {
  const auto x = ad::constant(Tensor::vector({-1.0}));
  CHECK_THROWS_AS(ad::sqrt(x), NumericError);
  const auto z = ad::constant(Tensor::vector({0.0}));
  CHECK_THROWS_AS(ad::div(ad::constant(Tensor::vector({1.0})), z), NumericError);
}

TEST_CASE("max_over_axis routes the gradient to the first maximum") {
  auto x = ad::parameter(Tensor::matrix({{1, 5}, {3, 5}, {3, 0}}));
  const auto m = ad::max_over_axis(x, 0);
  CHECK(m.value() == Tensor::vector({3, 5}));
  ad::backward(ad::sum(m));
  CHECK(x.grad() == Tensor::matrix({{0, 1}, {1, 0}, {0, 0}}));
}

TEST_CASE("broadcast and axis reductions") {
  auto v = ad::parameter(Tensor::vector({1, 2, 3}));
  const auto b = ad::broadcast(v, {2, 3});
  CHECK(b.value() == Tensor::matrix({{1, 2, 3}, {1, 2, 3}}));
  ad::backward(ad::sum(b));
  CHECK(v.grad() == Tensor::vector({2, 2, 2}));

  const auto m = ad::constant(Tensor::matrix({{1, 2}, {3, 4}}));
  CHECK(ad::sum_over_axis(m, 0).value() == Tensor::vector({4, 6}));
  CHECK(ad::mean_over_axis(m, 1).value() == Tensor::vector({1.5, 3.5}));
  CHECK(ad::transpose(m).value() == Tensor::matrix({{1, 3}, {2, 4}}));
  CHECK(ad::diagonal(m).value() == Tensor::vector({1, 4}));
}

TEST_CASE("every op passes the finite-difference suite") {
  GradCheckOptions options;
  options.seed = 11;
  for (const auto& r : run_gradcheck_suite(options)) {
    INFO(format_gradcheck_line(r));
    CHECK(r.passed);
    CHECK(r.trials >= options.pipeline_trials);
  }
}

TEST_CASE("adam single step on theta squared") {
  // Bias-corrected m_hat = 2, v_hat = 4, so the step is lr * 2 / (2 + eps).
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState adam(cfg, {Shape{1}});
  Tensor theta = Tensor::vector({1.0});
  const Tensor grad = Tensor::vector({2.0});
  Tensor* params[] = {&theta};
  const Tensor* grads[] = {&grad};
  adam.step(params, grads, 0.1);
  CHECK(theta[0] == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
  CHECK(theta[0] == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(adam.step_count() == 1);
}

TEST_CASE("adam zero gradient is a fixed point without decay") {
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState adam(cfg, {Shape{3}});
  Tensor theta = Tensor::vector({1.0, -2.0, 0.5});
  const Tensor before = theta;
  const Tensor grad(Shape{3}, 0.0);
  Tensor* params[] = {&theta};
  const Tensor* grads[] = {&grad};
  for (int i = 0; i < 5; ++i) adam.step(params, grads, 1e-3);
  CHECK(theta == before);
}

TEST_CASE("decoupled weight decay alone scales by 1 - lr*wd") {
  AdamConfig cfg;
  cfg.weight_decay = 1e-6;
  AdamState adam(cfg, {Shape{2}});
  Tensor theta = Tensor::vector({1.0, -3.0});
  const Tensor grad(Shape{2}, 0.0);
  Tensor* params[] = {&theta};
  const Tensor* grads[] = {&grad};
  adam.step(params, grads, 1e-3);
  CHECK(theta[0] == 1.0 * (1.0 - 1e-3 * 1e-6));
  CHECK(theta[1] == -3.0 * (1.0 - 1e-3 * 1e-6));
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-3, 0.0) == 1e-3);
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-3, 0.0) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(cosine_lr(150, 100, 1e-3, 2e-4) == 2e-4);
}

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.tensors.push_back({"a.w", Tensor::matrix({{1.0, -0.0}, {1e-300, 3.141592653589793}})});
  c.tensors.push_back({"a.b", Tensor::vector({std::nextafter(1.0, 2.0)})});
  c.tensors.push_back({"s", Tensor::scalar(-7.25)});
  c.meta = {{"kind", "test"}, {"note", "x=1"}};
  return c;
}

}  // namespace

TEST_CASE("pmnt round trip is bit exact") {
  const Checkpoint c = sample_checkpoint();
  const std::string bytes = encode_pmnt(c);
  CHECK(bytes.substr(0, 5) == "PMNT1");
  const Checkpoint d = decode_pmnt(bytes);
  REQUIRE(d.tensors.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(d.tensors[i].name == c.tensors[i].name);
    CHECK(d.tensors[i].tensor.shape() == c.tensors[i].tensor.shape());
    for (std::size_t k = 0; k < c.tensors[i].tensor.size(); ++k) {
      CHECK(std::bit_cast<std::uint64_t>(d.tensors[i].tensor[k]) == std::bit_cast<std::uint64_t>(c.tensors[i].tensor[k]));
    }
  }
  CHECK(d.meta_value("note") == "x=1");
  CHECK(encode_pmnt(d) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "pm_unit_roundtrip.pmnt";
  write_pmnt(path, c);
  CHECK(encode_pmnt(read_pmnt(path)) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("pmnt rejects corrupt input") {
  const std::string bytes = encode_pmnt(sample_checkpoint());
  std::string bad_magic = bytes;
  bad_magic[4] = '2';
  CHECK_THROWS_AS(decode_pmnt(bad_magic), FormatError);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() - 1}) {
    CHECK_THROWS_AS(decode_pmnt(bytes.substr(0, cut)), FormatError);
  }
  CHECK_THROWS_AS(decode_pmnt(bytes + "x"), FormatError);

  Checkpoint dup = sample_checkpoint();
  dup.tensors.push_back(dup.tensors[0]);
  CHECK_THROWS_AS(decode_pmnt(encode_pmnt(dup)), FormatError);
  CHECK_THROWS_AS(read_pmnt("/nonexistent/dir/x.pmnt"), DataError);
}

TEST_CASE("derived seeds and rng streams are reproducible") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.normal() == b.normal());
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(c.below(5) < 5);
  }
}
