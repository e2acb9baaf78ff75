#include "pointmoment/collapse.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <numeric>

#include "pointmoment/error.hpp"

namespace pointmoment {

double CollapseReport::mean_dim_std() const {
  if (per_dim_std.empty()) return 0.0;
  return std::accumulate(per_dim_std.begin(), per_dim_std.end(), 0.0) / static_cast<double>(per_dim_std.size());
}

double effective_rank_from_singular_values(const std::vector<double>& singular_values) {
  const double total = std::accumulate(singular_values.begin(), singular_values.end(), 0.0);
  if (!(total > 0.0)) return 1.0;
  double entropy = 0.0;
  for (double s : singular_values) {
    const double p = s / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

CollapseReport collapse_metrics(const Tensor& z) {
  if (z.rank() != 2) throw ShapeError("collapse_metrics: expected B x D, got " + shape_string(z.shape()));
  const std::size_t b = z.dim(0), d = z.dim(1);
  if (b < 2) throw UsageError("collapse_metrics: need at least 2 rows");

  Eigen::MatrixXd centered(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = z.at(i, j);
  const Eigen::RowVectorXd mean = centered.colwise().mean();
  centered.rowwise() -= mean;

  CollapseReport report;
  report.per_dim_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    report.per_dim_std[j] = std::sqrt(centered.col(static_cast<Eigen::Index>(j)).squaredNorm() / static_cast<double>(b));
  }

  // Singular values relative to the largest; anything at rounding level is zero.
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const Eigen::VectorXd& sv = svd.singularValues();
  std::vector<double> values;
  double scale = 0.0;
  for (double v : z.data()) scale = std::max(scale, std::abs(v));
  const double noise = 1e-12 * scale * std::sqrt(static_cast<double>(b * d));
  if (sv.size() && sv(0) > noise) {
    const double cutoff = std::max(noise, sv(0) * 1e-12 * static_cast<double>(std::max(b, d)));
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv(i) > cutoff) values.push_back(sv(i));
  }
  report.effective_rank = effective_rank_from_singular_values(values);

  double sum_abs = 0.0;
  std::size_t pairs = 0;
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = p + 1; q < d; ++q) {
      ++pairs;
      const double denom = report.per_dim_std[p] * report.per_dim_std[q] * static_cast<double>(b);
      if (denom <= 0.0) continue;
      sum_abs += std::abs(centered.col(static_cast<Eigen::Index>(p)).dot(centered.col(static_cast<Eigen::Index>(q))) / denom);
    }
  }
  report.mean_abs_offdiag_corr = pairs ? sum_abs / static_cast<double>(pairs) : 0.0;
  return report;
}

}  // namespace pointmoment
