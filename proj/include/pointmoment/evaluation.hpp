#pragma once

// Frozen-feature linear probing, embedding export and the ablation / lambda
// sweep harnesses.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pointmoment/collapse.hpp"
#include "pointmoment/geometry.hpp"
#include "pointmoment/model.hpp"
#include "pointmoment/tensor.hpp"

namespace pointmoment {

struct TrainConfig;
struct TrainState;

// One encoder feature row per cloud (projection head discarded).
struct FeatureMatrix {
  Tensor rows;  // [n, feature_dim]
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return rows.rank() == 2 ? rows.dim(1) : 0; }
};

// Encoder-only forward of each (normalized, unaugmented) cloud.
FeatureMatrix extract_features(const ModelParams& params, const Dataset& data, std::size_t threads = 1);

struct ProbeOptions {
  double reg = 1e-3;
  std::size_t epochs = 200;
  // Step size step0 / sqrt(t) for update t = 1, 2, ...; constant when fixed_step.
  double step0 = 0.1;
  bool fixed_step = false;
  // Mini-batch size; 0 means full batch.
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

// One-vs-rest linear SVM over standardized features.
struct LinearProbe {
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;  // 1 / std, or 1 for constant features
  Tensor weights;                     // [classes, feature_dim]
  std::vector<double> bias;

  std::size_t num_classes() const { return bias.size(); }
  std::vector<double> scores(std::span<const double> feature) const;
  // Highest score; ties go to the lowest class index.
  std::size_t predict(std::span<const double> feature) const;
};

// L2-regularized hinge loss, subgradient descent. Throws UsageError when the
// training set has fewer than 2 classes. If `objective_trace` is given, the
// summed one-vs-rest objective is appended after every epoch.
LinearProbe train_linear_probe(const FeatureMatrix& train, const ProbeOptions& options,
                               std::vector<double>* objective_trace = nullptr);

// Summed one-vs-rest objective sum_c [reg/2 |w_c|^2 + mean_i hinge].
double probe_objective(const LinearProbe& probe, const FeatureMatrix& data, double reg);

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_accuracy;
  std::size_t correct = 0;
  std::size_t total = 0;
};

ProbeResult evaluate_probe(const LinearProbe& probe, const FeatureMatrix& test);

// Pre-train, then probe frozen features of the test split.
struct RunOutcome {
  ProbeResult probe;
  CollapseReport collapse;  // on test-split projector embeddings
};

RunOutcome pretrain_and_probe(const TrainConfig& config, const Dataset& train, const Dataset& test,
                              const ProbeOptions& probe);

struct AblationRow {
  std::uint64_t seed = 0;
  bool invariance = true;
  bool order2 = false;
  bool order3 = false;
  double accuracy = 0.0;
  double effective_rank = 0.0;
};

// Per seed: invariance only, + order 2, + orders {2,3}.
std::vector<AblationRow> ablation_suite(const TrainConfig& base, const Dataset& train, const Dataset& test,
                                        const ProbeOptions& probe, std::span<const std::uint64_t> seeds);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

struct SweepRow {
  double lambda = 0.0;
  double accuracy = 0.0;
};

std::vector<SweepRow> lambda_sweep(const TrainConfig& base, const Dataset& train, const Dataset& test,
                                   const ProbeOptions& probe, std::span<const double> lambdas);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

// Header label,f0..f{dim-1}.
void write_features_csv(const std::filesystem::path& path, const FeatureMatrix& features);

struct Pca2d {
  Tensor coords;                        // [n, 2]
  std::vector<std::vector<double>> components;  // 2 unit vectors
  std::vector<double> variances;        // eigenvalues of the covariance
};

// Top two principal components by power iteration with deflation
// (convergence tolerance 1e-10). Requires at least 2 rows.
Pca2d pca2d(const FeatureMatrix& features);
// Header label,x,y.
void write_embedding2d_csv(const std::filesystem::path& path, const FeatureMatrix& features, const Pca2d& pca);

}  // namespace pointmoment
