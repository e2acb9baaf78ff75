#include "pointmoment/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_set>

#include "pointmoment/error.hpp"
#include "pointmoment/model.hpp"
#include "pointmoment/moments.hpp"
#include "pointmoment/random.hpp"

namespace pointmoment {
namespace {

// Perturbations of size h move ReLU inputs and max candidates by at most a
// few multiples of h for the small inputs used here.
constexpr double kKinkMargin = 1e-4;
// Below this column std, rounding in the standardized values swamps a
// central difference at h = 1e-5.
constexpr double kMinColumnStd = 1e-2;
constexpr std::size_t kMaxRedraws = 1000;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), Tensor::Uninitialized{});
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Magnitude in [lo, hi] with a random sign.
Tensor away_from_zero(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape), Tensor::Uninitialized{});
  for (double& v : t.data()) v = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return t;
}

// sum(out * R) with fixed random R, so every output entry is weighted.
ad::Var weighted_sum(const ad::Var& out, const Tensor& r) {
  if (out.value().rank() == 0) return ad::scale(out, r[0]);
  return ad::sum(ad::mul(out, ad::constant(r)));
}

struct Trial {
  std::vector<ad::Var> leaves;
  std::function<ad::Var()> loss;
};

using TrialFactory = std::function<Trial(Rng&)>;

struct CheckCase {
  std::string name;
  bool composite = false;
  TrialFactory make;
};

Trial elementwise(Rng& rng, std::vector<Tensor> inputs, std::function<ad::Var(const std::vector<ad::Var>&)> op) {
  Trial t;
  for (auto& in : inputs) t.leaves.push_back(ad::parameter(std::move(in)));
  const Tensor probe = op(t.leaves).value();
  const Tensor r = random_tensor(probe.shape(), rng);
  auto leaves = t.leaves;
  t.loss = [leaves, r, op] { return weighted_sum(op(leaves), r); };
  return t;
}

// Matrix with a clear winner along `axis` in every slice.
Tensor distinct_maxima(const Shape& shape, Rng& rng) {
  for (;;) {
    Tensor t = random_tensor(shape, rng);
    auto sorted = std::vector<double>(t.data().begin(), t.data().end());
    std::sort(sorted.begin(), sorted.end());
    bool ok = true;
    for (std::size_t i = 1; i < sorted.size(); ++i) ok = ok && sorted[i] - sorted[i - 1] > 1e-3;
    if (ok) return t;
  }
}

std::vector<unsigned> random_orders(Rng& rng) {
  switch (rng.below(3)) {
    case 0: return {2};
    case 1: return {3};
    default: return {2, 3};
  }
}

EncoderConfig small_encoder(Rng& rng) {
  EncoderConfig c;
  const std::size_t w = 4 + rng.below(3);
  c.point_mlp_widths = {3, w, w + 1};
  c.feature_dim = w + 1;
  c.embed_dim = 3 + rng.below(2);
  c.projector_hidden = 5;
  return c;
}

std::vector<PointCloud> random_clouds(std::size_t count, std::size_t n, Rng& rng) {
  std::vector<PointCloud> clouds;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<Point3> pts(n);
    for (auto& p : pts)
      for (double& v : p) v = rng.uniform(-1.0, 1.0);
    clouds.emplace_back(std::move(pts));
  }
  return clouds;
}

std::vector<ad::Var> param_leaves(const ModelParams& params) {
  std::vector<ad::Var> leaves;
  for (const auto& [name, v] : params.named()) leaves.push_back(v);
  return leaves;
}

// Random non-zero biases so ReLU inputs are not pinned at exactly 0.
ModelParams random_model(const EncoderConfig& c, Rng& rng) {
  ModelParams p = init_params(c, rng);
  for (Tensor* v : p.values())
    for (double& x : v->data()) x += rng.uniform(-0.3, 0.3);
  return p;
}

std::vector<CheckCase> build_cases() {
  using V = std::vector<ad::Var>;
  std::vector<CheckCase> cases;
  auto op = [&cases](std::string name, TrialFactory f) { cases.push_back({std::move(name), false, std::move(f)}); };
  auto composite = [&cases](std::string name, TrialFactory f) { cases.push_back({std::move(name), true, std::move(f)}); };
  const Shape m34{3, 4};

  op("add", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), random_tensor(m34, r)}, [](const V& v) { return ad::add(v[0], v[1]); });
  });
  op("sub", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), random_tensor(m34, r)}, [](const V& v) { return ad::sub(v[0], v[1]); });
  });
  op("mul", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), random_tensor(m34, r)}, [](const V& v) { return ad::mul(v[0], v[1]); });
  });
  op("div", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), away_from_zero(m34, r, 0.5, 1.5)},
                       [](const V& v) { return ad::div(v[0], v[1]); });
  });
  op("scale", [m34](Rng& r) {
    const double c = r.uniform(-2.0, 2.0);
    return elementwise(r, {random_tensor(m34, r)}, [c](const V& v) { return ad::scale(v[0], c); });
  });
  op("add_scalar", [m34](Rng& r) {
    const double c = r.uniform(-2.0, 2.0);
    return elementwise(r, {random_tensor(m34, r)}, [c](const V& v) { return ad::add_scalar(v[0], c); });
  });
  op("relu", [m34](Rng& r) {
    return elementwise(r, {away_from_zero(m34, r, 0.05, 1.0)}, [](const V& v) { return ad::relu(v[0]); });
  });
  op("square", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r)}, [](const V& v) { return ad::square(v[0]); });
  });
  op("sqrt", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r, 0.5, 2.0)}, [](const V& v) { return ad::sqrt(v[0]); });
  });
  op("matmul", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), random_tensor({4, 5}, r)},
                       [](const V& v) { return ad::matmul(v[0], v[1]); });
  });
  op("linear", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), random_tensor({4, 5}, r), random_tensor({5}, r)},
                       [](const V& v) { return ad::linear(v[0], v[1], v[2]); });
  });
  op("transpose", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r)}, [](const V& v) { return ad::transpose(v[0]); });
  });
  op("reshape", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r)}, [](const V& v) { return ad::reshape(v[0], {2, 6}); });
  });
  op("concat_rows", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r), random_tensor({2, 4}, r)},
                       [](const V& v) { return ad::concat_rows({v[0], v[1]}); });
  });
  op("diagonal", [](Rng& r) {
    return elementwise(r, {random_tensor({4, 4}, r)}, [](const V& v) { return ad::diagonal(v[0]); });
  });
  op("broadcast", [](Rng& r) {
    static const Shape kSources[] = {{4}, {1, 4}, {3, 1}, {}};
    const Shape src = kSources[r.below(4)];
    return elementwise(r, {random_tensor(src, r)}, [](const V& v) { return ad::broadcast(v[0], {3, 4}); });
  });
  op("sum", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r)}, [](const V& v) { return ad::sum(v[0]); });
  });
  op("mean", [m34](Rng& r) {
    return elementwise(r, {random_tensor(m34, r)}, [](const V& v) { return ad::mean(v[0]); });
  });
  op("sum_over_axis", [m34](Rng& r) {
    const std::size_t axis = r.below(2);
    return elementwise(r, {random_tensor(m34, r)}, [axis](const V& v) { return ad::sum_over_axis(v[0], axis); });
  });
  op("mean_over_axis", [m34](Rng& r) {
    const std::size_t axis = r.below(2);
    return elementwise(r, {random_tensor(m34, r)}, [axis](const V& v) { return ad::mean_over_axis(v[0], axis); });
  });
  op("max_over_axis", [m34](Rng& r) {
    const std::size_t axis = r.below(2);
    return elementwise(r, {distinct_maxima(m34, r)}, [axis](const V& v) { return ad::max_over_axis(v[0], axis); });
  });

  composite("standardize", [](Rng& r) {
    const std::size_t b = 3 + r.below(6), d = 2 + r.below(5);
    return elementwise(r, {random_tensor({b, d}, r)}, [](const V& v) { return standardize(v[0]).z_hat(); });
  });
  composite("mixed_moment", [](Rng& r) {
    const std::size_t b = 3 + r.below(6), d = 3 + r.below(4), k = 2 + r.below(2);
    std::vector<std::size_t> all(d);
    for (std::size_t i = 0; i < d; ++i) all[i] = i;
    r.shuffle(all.begin(), all.end());
    std::vector<std::size_t> idx(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
    return elementwise(r, {random_tensor({b, d}, r)},
                       [idx](const V& v) { return mixed_moment(standardize(v[0]), idx); });
  });
  composite("rr_loss", [](Rng& r) {
    const std::size_t b = 3 + r.below(6), d = 3 + r.below(4);
    MomentSpec spec;
    spec.orders = random_orders(r);
    const std::size_t views = 1 + r.below(2);
    std::vector<Tensor> in;
    for (std::size_t i = 0; i < views; ++i) in.push_back(random_tensor({b, d}, r));
    return elementwise(r, std::move(in), [spec](const V& v) {
      std::vector<StandardizedBatch> zs;
      for (const auto& x : v) zs.push_back(standardize(x));
      return rr_loss(zs, spec).loss;
    });
  });
  composite("cross_correlation", [](Rng& r) {
    const std::size_t b = 3 + r.below(6), d = 2 + r.below(5);
    return elementwise(r, {random_tensor({b, d}, r), random_tensor({b, d}, r)},
                       [](const V& v) { return cross_correlation(standardize(v[0]), standardize(v[1])); });
  });
  composite("ti_loss", [](Rng& r) {
    const std::size_t b = 3 + r.below(6), d = 2 + r.below(5);
    return elementwise(r, {random_tensor({b, d}, r), random_tensor({b, d}, r)},
                       [](const V& v) { return ti_loss(cross_correlation(standardize(v[0]), standardize(v[1]))); });
  });
  composite("total_loss", [](Rng& r) {
    const std::size_t b = 3 + r.below(6), d = 3 + r.below(4);
    MomentSpec spec;
    spec.orders = random_orders(r);
    spec.branch_mode = r.below(2) ? BranchMode::All : BranchMode::Single;
    spec.lambda = r.uniform(0.1, 2.0);
    const std::uint64_t branch_seed = r.next_u64();
    return elementwise(r, {random_tensor({b, d}, r), random_tensor({b, d}, r)}, [spec, branch_seed](const V& v) {
      Rng branch(branch_seed);
      return total_loss(v[0], v[1], spec, branch).loss;
    });
  });
  composite("encoder_forward", [](Rng& r) {
    const ModelParams p = random_model(small_encoder(r), r);
    const auto clouds = random_clouds(1, 3 + r.below(6), r);
    Trial t;
    t.leaves = param_leaves(p);
    t.loss = [p, clouds] { return ad::sum(ad::square(encoder_forward(p, clouds[0]))); };
    return t;
  });
  composite("projector_forward", [](Rng& r) {
    const ModelParams p = random_model(small_encoder(r), r);
    const std::size_t b = 2 + r.below(4);
    const Tensor feat = random_tensor({b, p.config().feature_dim}, r, 0.0, 1.0);
    const Tensor w = random_tensor({b, p.config().embed_dim}, r);
    Trial t;
    t.leaves = param_leaves(p);
    t.leaves.push_back(ad::parameter(feat));
    auto f = t.leaves.back();
    t.loss = [p, f, w] { return weighted_sum(projector_forward(p, f), w); };
    return t;
  });
  composite("encoder_pipeline", [](Rng& r) {
    const ModelParams p = random_model(small_encoder(r), r);
    const std::size_t b = 3 + r.below(3), n = 4 + r.below(4);
    const auto v1 = random_clouds(b, n, r);
    const auto v2 = random_clouds(b, n, r);
    MomentSpec spec;
    spec.orders = random_orders(r);
    spec.branch_mode = r.below(2) ? BranchMode::All : BranchMode::Single;
    spec.lambda = r.uniform(0.1, 2.0);
    const std::uint64_t branch_seed = r.next_u64();
    Trial t;
    t.leaves = param_leaves(p);
    t.loss = [p, v1, v2, spec, branch_seed] {
      Rng branch(branch_seed);
      const auto z1 = projector_forward(p, encode_batch(p, std::span<const PointCloud>(v1)));
      const auto z2 = projector_forward(p, encode_batch(p, std::span<const PointCloud>(v2)));
      return total_loss(z1, z2, spec, branch).loss;
    };
    return t;
  });
  return cases;
}

// FNV-1a, so per-case streams do not depend on the standard library.
std::uint64_t name_tag(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double gradient_rel_error(const std::function<ad::Var()>& loss_fn, std::span<const ad::Var> leaves, double h) {
  for (auto leaf : leaves) leaf.zero_grad();
  const ad::Var loss = loss_fn();
  ad::backward(loss);
  std::vector<double> analytic, numeric;
  for (auto leaf : leaves) {
    const Tensor& g = leaf.grad();
    Tensor& x = leaf.mutable_value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      analytic.push_back(g.size() ? g[i] : 0.0);
      const double saved = x[i];
      x[i] = saved + h;
      const double fp = loss_fn().value().item();
      x[i] = saved - h;
      const double fm = loss_fn().value().item();
      x[i] = saved;
      numeric.push_back((fp - fm) / (2.0 * h));
    }
  }
  std::vector<double> diff(analytic.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
  return norm(diff) / std::max({norm(analytic), norm(numeric), 1e-8});
}

double kink_margin(const ad::Var& root) {
  double margin = std::numeric_limits<double>::infinity();
  std::vector<const ad::Node*> stack{&root.node()};
  std::unordered_set<const ad::Node*> seen;
  while (!stack.empty()) {
    const ad::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    const std::string_view op = n->op;
    if (op == "relu" && !n->parents.empty()) {
      for (double x : n->parents[0]->value.data()) margin = std::min(margin, std::abs(x));
    } else if (op == "max_over_axis" && !n->parents.empty()) {
      // The reduced axis is not recorded; every axis consistent with the
      // output shape is checked, which can only shrink the margin.
      const Tensor& in = n->parents[0]->value;
      const Shape& s = in.shape();
      // Ties among exact zeros coming out of a ReLU stay tied under small
      // perturbations unless a ReLU input is near 0, which is checked above.
      const ad::Node* src = n->parents[0].get();
      while (std::string_view(src->op) == "reshape" && !src->parents.empty()) src = src->parents[0].get();
      const bool from_relu = std::string_view(src->op) == "relu";
      for (std::size_t axis = 0; axis < s.size(); ++axis) {
        Shape dropped = s;
        dropped.erase(dropped.begin() + static_cast<std::ptrdiff_t>(axis));
        if (dropped != n->value.shape()) continue;
        std::size_t outer = 1, inner = 1;
        for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
        for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
        const std::size_t extent = s[axis];
        if (extent < 2) continue;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            double best = -std::numeric_limits<double>::infinity(), second = best;
            for (std::size_t e = 0; e < extent; ++e) {
              const double x = in[(o * extent + e) * inner + i];
              if (x > best) {
                second = best;
                best = x;
              } else if (x > second) {
                second = x;
              }
            }
            if (from_relu && best == 0.0) continue;
            margin = std::min(margin, best - second);
          }
        }
      }
    }
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return margin;
}

double min_standardized_std(const ad::Var& root) {
  double low = std::numeric_limits<double>::infinity();
  std::vector<const ad::Node*> stack{&root.node()};
  std::unordered_set<const ad::Node*> seen;
  while (!stack.empty()) {
    const ad::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (std::string_view(n->op) == "standardize" && !n->parents.empty()) {
      const Tensor& in = n->parents[0]->value;
      const std::size_t b = in.dim(0), d = in.dim(1);
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < b; ++i) mean += in.at(i, j);
        mean /= static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) var += (in.at(i, j) - mean) * (in.at(i, j) - mean);
        low = std::min(low, std::sqrt(var / static_cast<double>(b)));
      }
    }
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return low;
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  for (const auto& c : build_cases()) {
    GradCheckResult res;
    res.name = c.name;
    Rng rng(derive_seed(options.seed, {name_tag(c.name)}));
    const std::size_t wanted = c.composite ? options.pipeline_trials : options.op_trials;
    try {
      while (res.trials < wanted) {
        Trial t = c.make(rng);
        const ad::Var probe = t.loss();
        if (kink_margin(probe) < kKinkMargin || min_standardized_std(probe) < kMinColumnStd) {
          if (++res.redrawn > kMaxRedraws) throw VerificationError("too many redraws");
          continue;
        }
        res.max_rel_error = std::max(res.max_rel_error, gradient_rel_error(t.loss, t.leaves, options.h));
        ++res.trials;
      }
    } catch (const Error& e) {
      throw VerificationError("gradcheck " + c.name + " trial " + std::to_string(res.trials) + ": " + e.what());
    }
    res.passed = res.max_rel_error <= options.tolerance;
    results.push_back(res);
  }
  return results;
}

std::string format_gradcheck_line(const GradCheckResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-18s trials=%-4zu redrawn=%-3zu max_rel_err=%.3e %s", r.name.c_str(), r.trials,
                r.redrawn, r.max_rel_error, r.passed ? "ok" : "FAIL");
  return buf;
}

}  // namespace pointmoment
