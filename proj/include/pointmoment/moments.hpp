#pragma once

// Mixed-moment redundancy reduction and cross-correlation invariance losses.
//
// Embeddings are standardized per dimension over the batch (population
// statistics). The redundancy term penalizes squared mixed moments
//   E[d1..dK] = (1/B) sum_b prod_i zhat[b, d_i]
// over unordered index combinations d1 < ... < dK for each configured order
// K, normalized by M = sum_K C(D, K) and averaged over the constrained views.
// The invariance term pushes the diagonal of the cross-correlation of the two
// views to 1.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pointmoment/autodiff.hpp"
#include "pointmoment/random.hpp"

namespace pointmoment {

inline constexpr double kStdEpsilon = 1e-8;

enum class BranchMode { All, Single };

std::string branch_mode_name(BranchMode mode);
BranchMode parse_branch_mode(const std::string& name);

struct MomentSpec {
  // Empty means no redundancy term (invariance only).
  std::vector<unsigned> orders{2, 3};
  BranchMode branch_mode = BranchMode::Single;
  double lambda = 0.5;
  std::size_t views = 2;
  std::uint64_t term_budget = 10'000'000;

  // Throws ConfigError. Checks orders against the embedding width D.
  void validate(std::size_t embed_dim) const;
};

// B x D matrix with zero-mean, unit-variance columns.
class StandardizedBatch {
 public:
  StandardizedBatch() = default;

  // Treats `z_hat` as already standardized; no check is made.
  static StandardizedBatch wrap(ad::Var z_hat);

  const ad::Var& z_hat() const { return z_hat_; }
  std::size_t batch() const { return z_hat_.shape()[0]; }
  std::size_t dim() const { return z_hat_.shape()[1]; }
  // True when produced by standardize().
  bool from_standardize() const { return from_standardize_; }
  // Columns whose std fell below kStdEpsilon (empty for wrapped batches).
  const std::vector<bool>& guarded() const { return guarded_; }

 private:
  friend StandardizedBatch standardize(const ad::Var& z);
  ad::Var z_hat_;
  bool from_standardize_ = false;
  std::vector<bool> guarded_;
};

// Column-wise (z - mean) / std with divisor B. Columns whose std falls below
// kStdEpsilon are divided by kStdEpsilon instead. Requires B >= 2.
StandardizedBatch standardize(const ad::Var& z);

// Throws ConfigError if K > D or the count overflows 64 bits.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);
std::uint64_t count_combinations(std::size_t dim, std::span<const unsigned> orders);

// Differentiable mixed moment for one tuple of distinct indices.
ad::Var mixed_moment(const StandardizedBatch& zh, std::span<const std::size_t> indices);

struct RedundancyLoss {
  ad::Var loss;
  // Contribution of each order; the values sum to loss.
  std::map<unsigned, double> by_order;
};

// Redundancy-reduction loss averaged over the given views.
RedundancyLoss rr_loss(std::span<const StandardizedBatch> views, const MomentSpec& spec);

// C[i][j] = (1/B) sum_b zh1[b,i] zh2[b,j]. When both inputs come from
// standardize(), also evaluates the fully normalized quotient form and throws
// VerificationError if the two disagree by more than 1e-9 on any entry whose
// columns were not guarded.
ad::Var cross_correlation(const StandardizedBatch& zh1, const StandardizedBatch& zh2);

// Quotient form: sum_b a_bi c_bj / (sqrt(sum_b a_bi^2) sqrt(sum_b c_bj^2)).
// Entries whose denominator is zero are reported as 0.
Tensor cross_correlation_normalized(const Tensor& zh1, const Tensor& zh2);

// (1/D) sum_d (1 - C_dd)^2.
ad::Var ti_loss(const ad::Var& c);

// ti + lambda * rr; returns `ti` itself when lambda == 0.
ad::Var combine_losses(const ad::Var& ti, const ad::Var& rr, double lambda);

struct LossBreakdown {
  double total = 0.0;
  double ti = 0.0;
  double rr = 0.0;
  std::map<unsigned, double> rr_by_order;
  // Views whose moments entered the redundancy term (0 and/or 1).
  std::vector<std::size_t> constrained_views;
};

struct TotalLoss {
  ad::Var loss;
  LossBreakdown breakdown;
};

// L = L_TI + lambda * L_RR. In Single mode one view is drawn uniformly from
// `rng` per call; in All mode both views are constrained. With lambda == 0
// the redundancy term is still evaluated for logging but left out of the graph.
TotalLoss total_loss(const ad::Var& z1, const ad::Var& z2, const MomentSpec& spec, Rng& rng);

}  // namespace pointmoment
