#include "pointmoment/moments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pointmoment/error.hpp"

namespace pointmoment {
namespace {

// D x B copy of a B x D batch so each dimension is a contiguous column.
Tensor to_columns(const Tensor& z) {
  const std::size_t b = z.dim(0), d = z.dim(1);
  Tensor cols(Shape{d, b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) cols.at(j, i) = z.at(i, j);
  return cols;
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Sum of squared mixed moments of one order over all d1 < ... < dK.
// When `grad` is given (D x B, column layout), adds coef * d(sum E^2)/dz.
class MomentKernel {
 public:
  MomentKernel(const Tensor& cols, Tensor* grad, double coef)
      : z_(cols), grad_(grad), coef_(coef), d_(cols.dim(0)), b_(cols.dim(1)), inv_b_(1.0 / static_cast<double>(b_)) {}

  double run(unsigned order) {
    switch (order) {
      case 2: return order2();
      case 3: return order3();
      default: return generic(order);
    }
  }

 private:
  const double* col(std::size_t d) const { return z_.raw() + d * b_; }
  double* gcol(std::size_t d) const { return grad_->raw() + d * b_; }

  double order2() {
    double total = 0.0;
    for (std::size_t d1 = 0; d1 < d_; ++d1) {
      for (std::size_t d2 = d1 + 1; d2 < d_; ++d2) {
        const double e = dot(col(d1), col(d2), b_) * inv_b_;
        total += e * e;
        if (grad_) {
          const double c = 2.0 * e * coef_ * inv_b_;
          axpy(c, col(d2), gcol(d1), b_);
          axpy(c, col(d1), gcol(d2), b_);
        }
      }
    }
    return total;
  }

  // Blocked over (d1, d2) pairs: the elementwise product of the pair is formed
  // once and reused for every d3 > d2. Backward recomputes moments rather than
  // storing them, so extra memory stays O(B).
  double order3() {
    double total = 0.0;
    std::vector<double> pair(b_), acc(b_);
    for (std::size_t d1 = 0; d1 < d_; ++d1) {
      for (std::size_t d2 = d1 + 1; d2 < d_; ++d2) {
        const double* a = col(d1);
        const double* c = col(d2);
        for (std::size_t i = 0; i < b_; ++i) pair[i] = a[i] * c[i];
        if (grad_) std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t d3 = d2 + 1; d3 < d_; ++d3) {
          const double e = dot(pair.data(), col(d3), b_) * inv_b_;
          total += e * e;
          if (grad_) {
            const double g = 2.0 * e * coef_ * inv_b_;
            axpy(g, pair.data(), gcol(d3), b_);
            axpy(g, col(d3), acc.data(), b_);
          }
        }
        if (grad_) {
          for (std::size_t i = 0; i < b_; ++i) {
            gcol(d1)[i] += acc[i] * c[i];
            gcol(d2)[i] += acc[i] * a[i];
          }
        }
      }
    }
    return total;
  }

  double generic(unsigned order) {
    idx_.assign(order, 0);
    prefix_.assign(static_cast<std::size_t>(order) * b_, 1.0);
    total_ = 0.0;
    recurse(order, 0, 0);
    return total_;
  }

  void recurse(unsigned order, unsigned level, std::size_t start) {
    for (std::size_t d = start; d + (order - level) <= d_; ++d) {
      idx_[level] = d;
      double* here = prefix_.data() + static_cast<std::size_t>(level) * b_;
      const double* prev = level == 0 ? nullptr : here - b_;
      for (std::size_t i = 0; i < b_; ++i) here[i] = (prev ? prev[i] : 1.0) * col(d)[i];
      if (level + 1 < order) {
        recurse(order, level + 1, d + 1);
        continue;
      }
      double e = 0.0;
      for (std::size_t i = 0; i < b_; ++i) e += here[i];
      e *= inv_b_;
      total_ += e * e;
      if (!grad_) continue;
      const double g = 2.0 * e * coef_ * inv_b_;
      for (std::size_t i = 0; i < b_; ++i) {
        // prod over j != k via prefix (levels < k) and a running suffix.
        double suffix = 1.0;
        for (unsigned k = order; k-- > 0;) {
          const double before = k == 0 ? 1.0 : prefix_[static_cast<std::size_t>(k - 1) * b_ + i];
          gcol(idx_[k])[i] += g * before * suffix;
          suffix *= col(idx_[k])[i];
        }
      }
    }
  }

  const Tensor& z_;
  Tensor* grad_;
  double coef_;
  std::size_t d_, b_;
  double inv_b_;
  std::vector<std::size_t> idx_;
  std::vector<double> prefix_;
  double total_ = 0.0;
};

}  // namespace

std::string branch_mode_name(BranchMode mode) { return mode == BranchMode::All ? "all" : "single"; }

BranchMode parse_branch_mode(const std::string& name) {
  if (name == "all") return BranchMode::All;
  if (name == "single") return BranchMode::Single;
  throw ConfigError("unknown branch mode '" + name + "' (expected all|single)");
}

void MomentSpec::validate(std::size_t embed_dim) const {
  for (unsigned k : orders) {
    if (k < 2) throw ConfigError("moment orders must be >= 2");
    if (k > embed_dim) {
      throw ConfigError("moment order " + std::to_string(k) + " exceeds embedding dimension " +
                        std::to_string(embed_dim));
    }
  }
  if (!(lambda >= 0.0)) throw ConfigError("spec.lambda must be >= 0");
  if (views != 2) throw ConfigError("spec.views must be 2");
  if (!orders.empty() && count_combinations(embed_dim, orders) > term_budget) {
    throw ConfigError("moment term count " + std::to_string(count_combinations(embed_dim, orders)) +
                      " exceeds budget " + std::to_string(term_budget));
  }
}

StandardizedBatch StandardizedBatch::wrap(ad::Var z_hat) {
  if (z_hat.value().rank() != 2) throw ShapeError("standardized batch must be B x D, got " + shape_string(z_hat.shape()));
  StandardizedBatch s;
  s.z_hat_ = std::move(z_hat);
  return s;
}

StandardizedBatch standardize(const ad::Var& z) {
  if (z.value().rank() != 2) throw ShapeError("standardize: expected B x D, got " + shape_string(z.shape()));
  const std::size_t b = z.shape()[0], d = z.shape()[1];
  if (b < 2) throw UsageError("standardize: batch size must be >= 2");
  const Tensor& in = z.value();
  const double inv_b = 1.0 / static_cast<double>(b);

  std::vector<double> mean(d, 0.0), stddev(d, 0.0);
  std::vector<bool> guarded(d, false);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += in.at(i, j);
  for (double& m : mean) m *= inv_b;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = in.at(i, j) - mean[j];
      stddev[j] += c * c;
    }
  for (std::size_t j = 0; j < d; ++j) {
    stddev[j] = std::sqrt(stddev[j] * inv_b);
    if (stddev[j] < kStdEpsilon) {
      stddev[j] = kStdEpsilon;
      guarded[j] = true;
    }
  }
  Tensor out(Shape{b, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = (in.at(i, j) - mean[j]) / stddev[j];

  ad::Var zh = ad::make_node("standardize", std::move(out), {z}, [stddev, guarded, b, d, inv_b](ad::Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < d; ++j) {
      double mean_g = 0.0, mean_gz = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        mean_g += n.grad.at(i, j);
        mean_gz += n.grad.at(i, j) * n.value.at(i, j);
      }
      mean_g *= inv_b;
      mean_gz *= inv_b;
      // A guarded column divides by a constant, so only the centering term remains.
      if (guarded[j]) mean_gz = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        g.at(i, j) += (n.grad.at(i, j) - mean_g - n.value.at(i, j) * mean_gz) / stddev[j];
      }
    }
  });
  StandardizedBatch s;
  s.z_hat_ = std::move(zh);
  s.from_standardize_ = true;
  s.guarded_ = std::move(guarded);
  return s;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) {
    throw ConfigError("moment order " + std::to_string(k) + " exceeds dimension " + std::to_string(n));
  }
  k = std::min(k, n - k);
  std::uint64_t c = 1;
  for (std::uint64_t i = 0; i < k; ++i) {
    // c * (n - i) is divisible by (i + 1); divide first to stay in range.
    const std::uint64_t g = std::gcd(c, i + 1);
    const std::uint64_t factor = (n - i) / ((i + 1) / g);
    if (__builtin_mul_overflow(c / g, factor, &c)) throw ConfigError("combination count overflows 64 bits");
  }
  return c;
}

std::uint64_t count_combinations(std::size_t dim, std::span<const unsigned> orders) {
  std::uint64_t total = 0;
  for (unsigned k : orders) {
    const std::uint64_t c = binomial(dim, k);
    if (total > std::numeric_limits<std::uint64_t>::max() - c) throw ConfigError("combination count overflows 64 bits");
    total += c;
  }
  return total;
}

ad::Var mixed_moment(const StandardizedBatch& zh, std::span<const std::size_t> indices) {
  const std::size_t d = zh.dim(), b = zh.batch();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  if (idx.empty()) throw UsageError("mixed_moment: empty index tuple");
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= d) throw UsageError("mixed_moment: index " + std::to_string(idx[k]) + " out of range");
    for (std::size_t j = 0; j < k; ++j)
      if (idx[j] == idx[k]) throw UsageError("mixed_moment: duplicate index " + std::to_string(idx[k]));
  }
  // Canonical order makes the value exactly symmetric in the tuple.
  std::sort(idx.begin(), idx.end());
  const Tensor& z = zh.z_hat().value();
  const double inv_b = 1.0 / static_cast<double>(b);
  double e = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double p = 1.0;
    for (std::size_t k : idx) p *= z.at(i, k);
    e += p;
  }
  e *= inv_b;
  return ad::make_node("mixed_moment", Tensor::scalar(e), {zh.z_hat()}, [idx, b, inv_b](ad::Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    const Tensor& z = n.parents[0]->value;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < idx.size(); ++j) {
        double p = 1.0;
        for (std::size_t k = 0; k < idx.size(); ++k)
          if (k != j) p *= z.at(i, idx[k]);
        g.at(i, idx[j]) += n.grad[0] * inv_b * p;
      }
    }
  });
}

RedundancyLoss rr_loss(std::span<const StandardizedBatch> views, const MomentSpec& spec) {
  if (views.empty()) throw UsageError("rr_loss: no views");
  const std::size_t d = views.front().dim();
  for (const auto& v : views) {
    if (v.dim() != d) throw ShapeError("rr_loss: views have different embedding widths");
    if (v.batch() < 2) throw UsageError("rr_loss: batch size must be >= 2");
  }
  if (spec.orders.empty()) throw ConfigError("rr_loss: no moment orders configured");
  spec.validate(d);

  const std::vector<unsigned> orders = spec.orders;
  const double m = static_cast<double>(count_combinations(d, orders));
  const double t = static_cast<double>(views.size());
  const double norm = 1.0 / (m * t);

  RedundancyLoss out;
  std::vector<Tensor> cols;
  for (const auto& v : views) cols.push_back(to_columns(v.z_hat().value()));
  for (unsigned k : orders) out.by_order[k] = 0.0;
  for (const auto& c : cols) {
    for (unsigned k : orders) out.by_order[k] += MomentKernel(c, nullptr, 0.0).run(k) * norm;
  }
  double total = 0.0;
  for (const auto& [k, v] : out.by_order) total += v;

  std::vector<ad::Var> parents;
  for (const auto& v : views) parents.push_back(v.z_hat());
  out.loss = ad::make_node("rr_loss", Tensor::scalar(total), parents,
                           [cols = std::move(cols), orders, norm](ad::Node& n) {
                             const double up = n.grad[0];
                             for (std::size_t v = 0; v < n.parents.size(); ++v) {
                               ad::Node& p = *n.parents[v];
                               if (!p.requires_grad) continue;
                               Tensor gcols(cols[v].shape());
                               for (unsigned k : orders) MomentKernel(cols[v], &gcols, up * norm).run(k);
                               Tensor& g = p.grad_buffer();
                               const std::size_t b = g.dim(0), d = g.dim(1);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < d; ++j) g.at(i, j) += gcols.at(j, i);
                             }
                           });
  return out;
}

Tensor cross_correlation_normalized(const Tensor& zh1, const Tensor& zh2) {
  if (zh1.shape() != zh2.shape() || zh1.rank() != 2) {
    throw ShapeError("cross_correlation: shape mismatch " + shape_string(zh1.shape()) + " vs " +
                     shape_string(zh2.shape()));
  }
  const std::size_t b = zh1.dim(0), d = zh1.dim(1);
  std::vector<double> n1(d, 0.0), n2(d, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      n1[j] += zh1.at(i, j) * zh1.at(i, j);
      n2[j] += zh2.at(i, j) * zh2.at(i, j);
    }
  Tensor c(Shape{d, d});
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = 0; q < d; ++q) {
      const double denom = std::sqrt(n1[p]) * std::sqrt(n2[q]);
      if (denom == 0.0) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < b; ++i) s += zh1.at(i, p) * zh2.at(i, q);
      c.at(p, q) = s / denom;
    }
  }
  return c;
}

ad::Var cross_correlation(const StandardizedBatch& zh1, const StandardizedBatch& zh2) {
  if (zh1.z_hat().shape() != zh2.z_hat().shape()) {
    throw ShapeError("cross_correlation: shape mismatch " + shape_string(zh1.z_hat().shape()) + " vs " +
                     shape_string(zh2.z_hat().shape()));
  }
  const double inv_b = 1.0 / static_cast<double>(zh1.batch());
  ad::Var c = ad::scale(ad::matmul(ad::transpose(zh1.z_hat()), zh2.z_hat()), inv_b);

  if (zh1.from_standardize() && zh2.from_standardize()) {
    const Tensor full = cross_correlation_normalized(zh1.z_hat().value(), zh2.z_hat().value());
    const Tensor& simple = c.value();
    const std::size_t d = full.dim(1);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        // A guarded column is not unit-variance, so the two forms legitimately differ there.
        if (zh1.guarded()[i] || zh2.guarded()[j]) continue;
        const double gap = std::abs(full.at(i, j) - simple.at(i, j));
        if (gap > 1e-9) {
          throw VerificationError("cross_correlation: simplified and normalized forms disagree by " +
                                  std::to_string(gap));
        }
      }
    }
  }
  return c;
}

ad::Var ti_loss(const ad::Var& c) {
  if (c.value().rank() != 2 || c.shape()[0] != c.shape()[1]) {
    throw ShapeError("ti_loss: expected a square matrix, got " + shape_string(c.shape()));
  }
  ad::Var gap = ad::add_scalar(ad::scale(ad::diagonal(c), -1.0), 1.0);
  return ad::mean(ad::square(gap));
}

ad::Var combine_losses(const ad::Var& ti, const ad::Var& rr, double lambda) {
  if (lambda == 0.0) return ti;
  return ad::add(ti, ad::scale(rr, lambda));
}

TotalLoss total_loss(const ad::Var& z1, const ad::Var& z2, const MomentSpec& spec, Rng& rng) {
  if (z1.shape() != z2.shape()) {
    throw ShapeError("total_loss: view shapes differ " + shape_string(z1.shape()) + " vs " + shape_string(z2.shape()));
  }
  const StandardizedBatch s1 = standardize(z1);
  const StandardizedBatch s2 = standardize(z2);

  TotalLoss out;
  ad::Var ti = ti_loss(cross_correlation(s1, s2));
  out.breakdown.ti = ti.value().item();

  if (spec.orders.empty()) {
    out.loss = ti;
  } else {
    std::vector<StandardizedBatch> constrained;
    if (spec.branch_mode == BranchMode::All) {
      constrained = {s1, s2};
      out.breakdown.constrained_views = {0, 1};
    } else {
      const std::size_t pick = static_cast<std::size_t>(rng.below(2));
      constrained = {pick == 0 ? s1 : s2};
      out.breakdown.constrained_views = {pick};
    }
    RedundancyLoss rr = rr_loss(constrained, spec);
    out.breakdown.rr = rr.loss.value().item();
    out.breakdown.rr_by_order = rr.by_order;
    out.loss = combine_losses(ti, rr.loss, spec.lambda);
  }
  out.breakdown.total = out.loss.value().item();
  return out;
}

}  // namespace pointmoment
