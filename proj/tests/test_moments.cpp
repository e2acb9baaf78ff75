#include <doctest.h>

#include <cmath>
#include <functional>

#include "pointmoment/error.hpp"
#include "pointmoment/gradcheck.hpp"
#include "pointmoment/moments.hpp"
#include "pointmoment/random.hpp"

using namespace pointmoment;

namespace {

Tensor random_matrix(std::size_t b, std::size_t d, Rng& rng) {
  Tensor t(Shape{b, d});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

double factorial(unsigned k) { return k <= 1 ? 1.0 : k * factorial(k - 1); }

// All ordered tuples of distinct indices, divided by K! to count each
// combination once.
double brute_force_rr(const std::vector<Tensor>& views, const std::vector<unsigned>& orders) {
  const std::size_t b = views[0].dim(0), d = views[0].dim(1);
  double m = 0.0;
  for (unsigned k : orders) m += static_cast<double>(binomial(d, k));
  double total = 0.0;
  for (const Tensor& z : views) {
    for (unsigned k : orders) {
      std::vector<std::size_t> idx(k);
      std::function<void(std::size_t)> rec = [&](std::size_t pos) {
        if (pos == k) {
          double e = 0.0;
          for (std::size_t r = 0; r < b; ++r) {
            double prod = 1.0;
            for (std::size_t i : idx) prod *= z.at(r, i);
            e += prod;
          }
          e /= static_cast<double>(b);
          total += e * e / factorial(k);
          return;
        }
        for (std::size_t j = 0; j < d; ++j) {
          bool used = false;
          for (std::size_t q = 0; q < pos; ++q) used = used || idx[q] == j;
          if (used) continue;
          idx[pos] = j;
          rec(pos + 1);
        }
      };
      rec(0);
    }
  }
  return total / (m * static_cast<double>(views.size()));
}

double rr_value(const std::vector<Tensor>& zh, const std::vector<unsigned>& orders) {
  std::vector<StandardizedBatch> views;
  for (const auto& z : zh) views.push_back(StandardizedBatch::wrap(ad::constant(z)));
  MomentSpec spec;
  spec.orders = orders;
  return rr_loss(views, spec).loss.value().item();
}

// 2^3 full factorial design: every pair and triple product is balanced.
Tensor factorial_design() {
  Tensor t(Shape{8, 3});
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 3; ++c) t.at(r, c) = (r >> c) & 1 ? 1.0 : -1.0;
  return t;
}

}  // namespace

TEST_CASE("standardize examples") {
  const auto one = standardize(ad::constant(Tensor::matrix({{1}, {3}})));
  CHECK(one.z_hat().value() == Tensor::matrix({{-1}, {1}}));
  CHECK(one.from_standardize());

  const auto two = standardize(ad::constant(Tensor::matrix({{0.3, -7, 2}, {5.5, 4, 1}})));
  for (double v : two.z_hat().value().data()) CHECK(std::abs(v) == 1.0);

  const auto flat = standardize(ad::constant(Tensor::matrix({{2, 1}, {2, 5}, {2, 3}})));
  for (std::size_t r = 0; r < 3; ++r) CHECK(flat.z_hat().value().at(r, 0) == 0.0);
  CHECK(flat.guarded() == std::vector<bool>{true, false});

  CHECK_THROWS_AS(standardize(ad::constant(Tensor::matrix({{1, 2}}))), UsageError);
}

TEST_CASE("standardized columns have zero mean and unit variance") {
  Rng rng(21);
  for (int t = 0; t < 100; ++t) {
    const std::size_t b = 2 + rng.below(63), d = 1 + rng.below(32);
    Tensor z = random_matrix(b, d, rng);
    for (double& v : z.data()) v = 3.0 * v + 10.0;
    const Tensor zh = standardize(ad::constant(z)).z_hat().value();
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < b; ++i) mean += zh.at(i, j);
      mean /= static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) var += (zh.at(i, j) - mean) * (zh.at(i, j) - mean);
      var /= static_cast<double>(b);
      CHECK(std::abs(mean) <= 1e-9);
      CHECK(std::abs(var - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("guarded column has a finite centering-only gradient") {
  auto z = ad::parameter(Tensor::matrix({{4, 1}, {4, 2}, {4, 6}}));
  const auto zh = standardize(z);
  ad::backward(ad::sum(ad::square(zh.z_hat())));
  CHECK(z.grad().all_finite());
  for (std::size_t r = 0; r < 3; ++r) CHECK(z.grad().at(r, 0) == 0.0);
}

TEST_CASE("combination counts") {
  const std::vector<unsigned> o23{2, 3}, o2{2}, o5{5};
  CHECK(count_combinations(4, o23) == 10);
  CHECK(count_combinations(512, o2) == 130816);
  CHECK(count_combinations(16, o23) == 680);
  CHECK(count_combinations(32, o23) == 496 + 4960);
  CHECK(binomial(60, 30) == 118264581564861424ULL);
  CHECK_THROWS_AS(count_combinations(4, o5), ConfigError);
  CHECK_THROWS_AS(binomial(200, 100), ConfigError);
}

TEST_CASE("mixed moment examples") {
  const auto a = StandardizedBatch::wrap(ad::constant(Tensor::matrix({{-1, -1}, {1, 1}})));
  const auto b = StandardizedBatch::wrap(ad::constant(Tensor::matrix({{-1, 1}, {1, -1}})));
  const std::size_t idx[] = {0, 1};
  CHECK(mixed_moment(a, idx).value().item() == 1.0);
  CHECK(mixed_moment(b, idx).value().item() == -1.0);
  const std::size_t dup[] = {1, 1};
  CHECK_THROWS_AS(mixed_moment(a, dup), UsageError);
  const std::size_t out_of_range[] = {0, 2};
  CHECK_THROWS(mixed_moment(a, out_of_range));
}

TEST_CASE("mixed moment is symmetric in its index tuple") {
  Rng rng(22);
  const auto zh = standardize(ad::constant(random_matrix(9, 5, rng)));
  std::vector<std::size_t> idx{4, 0, 2};
  const double ref = mixed_moment(zh, idx).value().item();
  std::sort(idx.begin(), idx.end());
  do {
    CHECK(mixed_moment(zh, idx).value().item() == ref);
  } while (std::next_permutation(idx.begin(), idx.end()));
}

TEST_CASE("rr_loss hand examples") {
  CHECK(rr_value({Tensor::matrix({{-1, -1}, {1, 1}})}, {2}) == 1.0);
  CHECK(rr_value({factorial_design()}, {2, 3}) == 0.0);
  CHECK(rr_value({factorial_design(), factorial_design()}, {2}) == 0.0);
}

TEST_CASE("rr_loss matches brute force") {
  Rng rng(23);
  for (int t = 0; t < 30; ++t) {
    const std::size_t b = 2 + rng.below(15), d = 4 + rng.below(5);
    const std::size_t views = 1 + rng.below(2);
    std::vector<Tensor> zh;
    for (std::size_t v = 0; v < views; ++v) zh.push_back(standardize(ad::constant(random_matrix(b, d, rng))).z_hat().value());
    for (const std::vector<unsigned>& orders : {std::vector<unsigned>{2}, {3}, {2, 3}, {4}, {2, 3, 4}}) {
      const double fast = rr_value(zh, orders);
      const double slow = brute_force_rr(zh, orders);
      CHECK(fast >= 0.0);
      CHECK(std::abs(fast - slow) <= 1e-12);
    }
  }
}

TEST_CASE("rr_loss by_order sums to the loss") {
  Rng rng(24);
  const auto zh = standardize(ad::constant(random_matrix(12, 6, rng)));
  MomentSpec spec;
  const auto r = rr_loss(std::span<const StandardizedBatch>(&zh, 1), spec);
  REQUIRE(r.by_order.size() == 2);
  CHECK(r.by_order.at(2) + r.by_order.at(3) == doctest::Approx(r.loss.value().item()).epsilon(1e-15));
}

TEST_CASE("identical columns give the maximal order-2 loss") {
  Rng rng(25);
  Tensor z(Shape{10, 5});
  for (std::size_t r = 0; r < 10; ++r) {
    const double v = rng.normal();
    for (std::size_t c = 0; c < 5; ++c) z.at(r, c) = v;
  }
  const auto zh = standardize(ad::constant(z));
  MomentSpec spec;
  spec.orders = {2};
  CHECK(rr_loss(std::span<const StandardizedBatch>(&zh, 1), spec).loss.value().item() ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rr_loss configuration errors") {
  Rng rng(26);
  const auto zh = standardize(ad::constant(random_matrix(6, 2, rng)));
  MomentSpec spec;
  CHECK_THROWS_AS(rr_loss(std::span<const StandardizedBatch>(&zh, 1), spec), ConfigError);
  spec.orders = {2};
  spec.term_budget = 0;
  CHECK_THROWS_AS(rr_loss(std::span<const StandardizedBatch>(&zh, 1), spec), ConfigError);
  spec = MomentSpec{};
  spec.orders = {1};
  CHECK_THROWS_AS(spec.validate(16), ConfigError);
}

TEST_CASE("mixed moment gradient matches the analytic formula") {
  auto p = ad::parameter(Tensor::matrix({{-1, -1}, {1, 1}}));
  const std::size_t idx[] = {0, 1};
  ad::backward(mixed_moment(StandardizedBatch::wrap(p), idx));
  CHECK(p.grad().at(0, 0) == -0.5);
  CHECK(p.grad().at(1, 1) == 0.5);
}

TEST_CASE("rr_loss gradient matches the analytic formula") {
  Rng rng(27);
  const std::size_t b = 7, d = 5;
  const Tensor zh = standardize(ad::constant(random_matrix(b, d, rng))).z_hat().value();
  auto p = ad::parameter(zh);
  MomentSpec spec;
  const auto view = StandardizedBatch::wrap(p);
  ad::backward(rr_loss(std::span<const StandardizedBatch>(&view, 1), spec).loss);

  // dL/dz[r, j] = (1/M) sum over combos containing j of 2 E (1/B) prod_{i != j} z[r, i].
  Tensor expected(Shape{b, d});
  const double m = static_cast<double>(count_combinations(d, spec.orders));
  auto visit = [&](const std::vector<std::size_t>& combo) {
    double e = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
      double prod = 1.0;
      for (std::size_t i : combo) prod *= zh.at(r, i);
      e += prod;
    }
    e /= static_cast<double>(b);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t j : combo) {
        double others = 1.0;
        for (std::size_t i : combo)
          if (i != j) others *= zh.at(r, i);
        expected.at(r, j) += 2.0 * e * others / static_cast<double>(b) / m;
      }
    }
  };
  for (std::size_t x = 0; x < d; ++x)
    for (std::size_t y = x + 1; y < d; ++y) {
      visit({x, y});
      for (std::size_t w = y + 1; w < d; ++w) visit({x, y, w});
    }
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(p.grad()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("identical columns receive identical gradients") {
  Rng rng(28);
  Tensor z = random_matrix(9, 4, rng);
  for (std::size_t r = 0; r < 9; ++r) z.at(r, 3) = z.at(r, 1);
  auto p = ad::parameter(z);
  const auto zh = standardize(p);
  MomentSpec spec;
  ad::backward(rr_loss(std::span<const StandardizedBatch>(&zh, 1), spec).loss);
    // The two columns enter different tuples, so only the summation order differs.
  for (std::size_t r = 0; r < 9; ++r) CHECK(p.grad().at(r, 1) == doctest::Approx(p.grad().at(r, 3)).epsilon(1e-12));
}

TEST_CASE("gradient vanishes where every moment vanishes") {
  auto p = ad::parameter(factorial_design());
  MomentSpec spec;
  auto loss = [&] {
    const auto zh = standardize(p);
    return rr_loss(std::span<const StandardizedBatch>(&zh, 1), spec).loss;
  };
  const ad::Var l = loss();
  CHECK(l.value().item() == 0.0);
  // A sum of squared moments is stationary where every moment is zero.
  ad::backward(l);
  for (double g : p.grad().data()) CHECK(g == 0.0);
  Tensor& x = p.mutable_value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + 1e-5;
    const double up = loss().value().item();
    x[i] = keep - 1e-5;
    const double down = loss().value().item();
    x[i] = keep;
    CHECK(std::abs(up - down) / 2e-5 <= 1e-9);
  }
}

TEST_CASE("cross-correlation forms and bounds") {
  Rng rng(29);
  const Tensor z = random_matrix(8, 4, rng);
  const auto s1 = standardize(ad::constant(z));
  const Tensor same = cross_correlation(s1, s1).value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(same.at(i, i) == doctest::Approx(1.0).epsilon(1e-9));

  Tensor neg = z;
  for (double& v : neg.data()) v = -v;
  const Tensor flipped = cross_correlation(s1, standardize(ad::constant(neg))).value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(flipped.at(i, i) == doctest::Approx(-1.0).epsilon(1e-9));

  const auto s2 = standardize(ad::constant(random_matrix(8, 4, rng)));
  const Tensor c = cross_correlation(s1, s2).value();
  const Tensor q = cross_correlation_normalized(s1.z_hat().value(), s2.z_hat().value());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(std::abs(c[i] - q[i]) <= 1e-9);
    CHECK(std::abs(c[i]) <= 1.0 + 1e-9);
  }
  const auto s3 = standardize(ad::constant(random_matrix(8, 3, rng)));
  CHECK_THROWS_AS(cross_correlation(s1, s3), UsageError);
}

TEST_CASE("ti_loss examples") {
  CHECK(ti_loss(ad::constant(Tensor::matrix({{1, 0}, {0, 1}}))).value().item() == 0.0);
  CHECK(ti_loss(ad::constant(Tensor::matrix({{0, 3}, {2, 0}}))).value().item() == 1.0);
  Tensor c(Shape{4, 4}, 0.3);
  c.at(0, 0) = 1.0;
  c.at(1, 1) = 0.5;
  c.at(2, 2) = 0.0;
  c.at(3, 3) = -1.0;
  CHECK(ti_loss(ad::constant(c)).value().item() == 1.3125);
  CHECK_THROWS_AS(ti_loss(ad::constant(Tensor(Shape{2, 3}))), ShapeError);
}

TEST_CASE("loss combination") {
  const auto ti = ad::constant(Tensor::scalar(0.2));
  const auto rr = ad::constant(Tensor::scalar(0.4));
  CHECK(combine_losses(ti, rr, 0.5).value().item() == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(combine_losses(ti, rr, 0.0).ptr() == ti.ptr());
  CHECK(MomentSpec{}.lambda == 0.5);
}

TEST_CASE("total loss breakdown and branch selection") {
  Rng data(30);
  const auto z1 = ad::constant(random_matrix(16, 6, data));
  const auto z2 = ad::constant(random_matrix(16, 6, data));

  MomentSpec spec;
  spec.lambda = 0.0;
  Rng rng(1);
  const auto zero = total_loss(z1, z2, spec, rng);
  CHECK(zero.breakdown.total == zero.breakdown.ti);
  CHECK(zero.loss.value().item() == zero.breakdown.ti);
  CHECK(zero.breakdown.rr > 0.0);

  spec.lambda = 0.5;
  spec.branch_mode = BranchMode::All;
  const auto all = total_loss(z1, z2, spec, rng);
  CHECK(all.breakdown.constrained_views == std::vector<std::size_t>{0, 1});
  CHECK(all.breakdown.total == doctest::Approx(all.breakdown.ti + 0.5 * all.breakdown.rr).epsilon(1e-15));

  spec.branch_mode = BranchMode::Single;
  std::size_t seen[2] = {0, 0};
  for (int i = 0; i < 200; ++i) {
    const auto single = total_loss(z1, z2, spec, rng);
    REQUIRE(single.breakdown.constrained_views.size() == 1);
    ++seen[single.breakdown.constrained_views[0]];
  }
  CHECK(seen[0] > 60);
  CHECK(seen[1] > 60);
  CHECK_THROWS_AS(total_loss(z1, ad::constant(random_matrix(16, 5, data)), spec, rng), ShapeError);
}

TEST_CASE("branch mode names") {
  CHECK(parse_branch_mode("single") == BranchMode::Single);
  CHECK(parse_branch_mode("all") == BranchMode::All);
  CHECK(branch_mode_name(BranchMode::All) == "all");
  CHECK_THROWS_AS(parse_branch_mode("both"), ConfigError);
}
