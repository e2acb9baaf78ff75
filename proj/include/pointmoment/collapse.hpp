#pragma once

#include <vector>

#include "pointmoment/tensor.hpp"

namespace pointmoment {

struct CollapseReport {
  // Population std of each embedding column (before standardization).
  std::vector<double> per_dim_std;
  // exp(Shannon entropy) of the normalized singular values of the centered
  // embedding matrix; 1 when the centered matrix is zero.
  double effective_rank = 1.0;
  double mean_abs_offdiag_corr = 0.0;

  double mean_dim_std() const;
};

// Z is B x D with B >= 2.
CollapseReport collapse_metrics(const Tensor& z);

// exp(-sum p log p) with p = s / sum(s); zero singular values are skipped.
double effective_rank_from_singular_values(const std::vector<double>& singular_values);

}  // namespace pointmoment
