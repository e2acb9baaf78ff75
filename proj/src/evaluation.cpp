#include "pointmoment/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "detail/util.hpp"
#include "pointmoment/error.hpp"
#include "pointmoment/random.hpp"
#include "pointmoment/training.hpp"

namespace pointmoment {
namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::size_t count_classes(const std::vector<std::size_t>& labels) {
  std::size_t c = 0;
  for (auto l : labels) c = std::max(c, l + 1);
  return c;
}

// Standardized copy of row i into `out`.
void standardize_row(const LinearProbe& p, const double* row, double* out) {
  for (std::size_t f = 0; f < p.feature_mean.size(); ++f) out[f] = (row[f] - p.feature_mean[f]) * p.feature_scale[f];
}

}  // namespace

FeatureMatrix extract_features(const ModelParams& params, const Dataset& data, std::size_t threads) {
  FeatureMatrix fm;
  fm.class_names = data.class_names;
  const std::size_t n = data.clouds.size();
  const std::size_t f = params.config().feature_dim;
  fm.rows = Tensor(Shape{n, f});
  fm.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& label = data.clouds[i].label();
    if (!label) throw DataError("cloud " + std::to_string(i) + " has no label");
    fm.labels[i] = *label;
  }
  double* out = fm.rows.raw();
  detail::parallel_for(n, threads, [&](std::size_t i) {
    const auto row = extract_feature(params, data.clouds[i]);
    std::copy(row.begin(), row.end(), out + i * f);
  });
  return fm;
}

std::vector<double> LinearProbe::scores(std::span<const double> feature) const {
  const std::size_t f = feature_mean.size();
  if (feature.size() != f) {
    throw ShapeError("probe expects " + std::to_string(f) + " features, got " + std::to_string(feature.size()));
  }
  std::vector<double> x(f);
  standardize_row(*this, feature.data(), x.data());
  std::vector<double> s(num_classes());
  for (std::size_t c = 0; c < s.size(); ++c) {
    const double* w = weights.raw() + c * f;
    double acc = bias[c];
    for (std::size_t k = 0; k < f; ++k) acc += w[k] * x[k];
    s[c] = acc;
  }
  return s;
}

std::size_t LinearProbe::predict(std::span<const double> feature) const {
  const auto s = scores(feature);
  std::size_t best = 0;
  for (std::size_t c = 1; c < s.size(); ++c)
    if (s[c] > s[best]) best = c;
  return best;
}

double probe_objective(const LinearProbe& probe, const FeatureMatrix& data, double reg) {
  const std::size_t n = data.size(), f = data.dim(), classes = probe.num_classes();
  std::vector<double> hinge(classes, 0.0);
  std::vector<double> x(f);
  for (std::size_t i = 0; i < n; ++i) {
    standardize_row(probe, data.rows.raw() + i * f, x.data());
    for (std::size_t c = 0; c < classes; ++c) {
      const double* w = probe.weights.raw() + c * f;
      double m = probe.bias[c];
      for (std::size_t k = 0; k < f; ++k) m += w[k] * x[k];
      const double y = data.labels[i] == c ? 1.0 : -1.0;
      hinge[c] += std::max(0.0, 1.0 - y * m);
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double* w = probe.weights.raw() + c * f;
    double sq = 0.0;
    for (std::size_t k = 0; k < f; ++k) sq += w[k] * w[k];
    total += 0.5 * reg * sq + hinge[c] / static_cast<double>(n);
  }
  return total;
}

LinearProbe train_linear_probe(const FeatureMatrix& train, const ProbeOptions& options,
                               std::vector<double>* objective_trace) {
  const std::size_t n = train.size(), f = train.dim();
  if (train.rows.size() != n * f) throw ShapeError("feature matrix rows do not match labels");
  const std::size_t classes = count_classes(train.labels);
  {
    std::vector<bool> seen(classes, false);
    std::size_t distinct = 0;
    for (auto l : train.labels)
      if (!seen[l]) seen[l] = true, ++distinct;
    if (distinct < 2) throw UsageError("linear probe needs at least 2 classes in the training set");
  }
  if (!train.rows.all_finite()) throw NumericError("non-finite entry in probe training features");

  LinearProbe p;
  p.feature_mean.assign(f, 0.0);
  p.feature_scale.assign(f, 1.0);
  const double* rows = train.rows.raw();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < f; ++k) p.feature_mean[k] += rows[i * f + k];
  for (double& m : p.feature_mean) m /= static_cast<double>(n);
  for (std::size_t k = 0; k < f; ++k) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = rows[i * f + k] - p.feature_mean[k];
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    p.feature_scale[k] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  p.weights = Tensor(Shape{classes, f});
  p.bias.assign(classes, 0.0);

  std::vector<double> x(n * f);
  for (std::size_t i = 0; i < n; ++i) standardize_row(p, rows + i * f, x.data() + i * f);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = options.batch_size == 0 ? n : std::min(options.batch_size, n);
  Rng rng(derive_seed(options.seed, {0x5356}));
  std::vector<double> gw(f);
  double* W = p.weights.raw();
  std::uint64_t t = 0;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    if (batch < n) rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      const double inv = 1.0 / static_cast<double>(stop - start);
      ++t;
      const double eta = options.fixed_step ? options.step0 : options.step0 / std::sqrt(static_cast<double>(t));
      for (std::size_t c = 0; c < classes; ++c) {
        double* w = W + c * f;
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (std::size_t j = start; j < stop; ++j) {
          const std::size_t i = order[j];
          const double* xi = x.data() + i * f;
          const double y = train.labels[i] == c ? 1.0 : -1.0;
          double m = p.bias[c];
          for (std::size_t k = 0; k < f; ++k) m += w[k] * xi[k];
          if (y * m < 1.0) {
            for (std::size_t k = 0; k < f; ++k) gw[k] -= y * xi[k];
            gb -= y;
          }
        }
        for (std::size_t k = 0; k < f; ++k) w[k] -= eta * (options.reg * w[k] + inv * gw[k]);
        p.bias[c] -= eta * inv * gb;
      }
    }
    if (objective_trace) objective_trace->push_back(probe_objective(p, train, options.reg));
  }
  return p;
}

ProbeResult evaluate_probe(const LinearProbe& probe, const FeatureMatrix& test) {
  const std::size_t classes = std::max(probe.num_classes(), count_classes(test.labels));
  ProbeResult r;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  const std::size_t f = test.dim();
  for (std::size_t i = 0; i < test.size(); ++i) {
    const std::size_t pred = probe.predict({test.rows.raw() + i * f, f});
    ++r.confusion[test.labels[i]][pred];
  }
  r.total = test.size();
  for (std::size_t c = 0; c < classes; ++c) r.correct += r.confusion[c][c];
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  r.per_class_accuracy.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t row = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
    if (row) r.per_class_accuracy[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(row);
  }
  return r;
}

RunOutcome pretrain_and_probe(const TrainConfig& config, const Dataset& train, const Dataset& test,
                              const ProbeOptions& probe) {
  const TrainState state = pretrain(config, train);
  const auto train_features = extract_features(state.params, train, config.threads);
  const auto test_features = extract_features(state.params, test, config.threads);
  const auto clf = train_linear_probe(train_features, probe);
  RunOutcome out;
  out.probe = evaluate_probe(clf, test_features);
  out.collapse = collapse_metrics(embed_dataset(state.params, test));
  return out;
}

namespace {

// Harness runs never write metrics or checkpoints of their own.
TrainConfig harness_config(const TrainConfig& base) {
  TrainConfig c = base;
  c.metrics_path.clear();
  c.checkpoint_dir.clear();
  c.checkpoint_every = 0;
  return c;
}

}  // namespace

std::vector<AblationRow> ablation_suite(const TrainConfig& base, const Dataset& train, const Dataset& test,
                                        const ProbeOptions& probe, std::span<const std::uint64_t> seeds) {
  const std::vector<std::vector<unsigned>> variants{{}, {2}, {2, 3}};
  std::vector<AblationRow> rows;
  for (const auto seed : seeds) {
    for (const auto& orders : variants) {
      TrainConfig c = harness_config(base);
      c.seed = seed;
      c.spec.orders = orders;
      const auto outcome = pretrain_and_probe(c, train, test, probe);
      AblationRow row;
      row.seed = seed;
      row.order2 = std::find(orders.begin(), orders.end(), 2u) != orders.end();
      row.order3 = std::find(orders.begin(), orders.end(), 3u) != orders.end();
      row.accuracy = outcome.probe.accuracy;
      row.effective_rank = outcome.collapse.effective_rank;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  auto out = open_csv(path);
  out << "seed,invariance,order2,order3,accuracy,effective_rank\n";
  for (const auto& r : rows) {
    out << r.seed << ',' << int(r.invariance) << ',' << int(r.order2) << ',' << int(r.order3) << ','
        << detail::format_double(r.accuracy) << ',' << detail::format_double(r.effective_rank) << '\n';
  }
}

std::vector<SweepRow> lambda_sweep(const TrainConfig& base, const Dataset& train, const Dataset& test,
                                   const ProbeOptions& probe, std::span<const double> lambdas) {
  std::vector<SweepRow> rows;
  for (const double lambda : lambdas) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0, got " + detail::format_double(lambda));
    TrainConfig c = harness_config(base);
    c.spec.lambda = lambda;
    rows.push_back({lambda, pretrain_and_probe(c, train, test, probe).probe.accuracy});
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  auto out = open_csv(path);
  out << "lambda,accuracy\n";
  for (const auto& r : rows) out << detail::format_double(r.lambda) << ',' << detail::format_double(r.accuracy) << '\n';
}

void write_features_csv(const std::filesystem::path& path, const FeatureMatrix& features) {
  auto out = open_csv(path);
  const std::size_t f = features.dim();
  out << "label";
  for (std::size_t k = 0; k < f; ++k) out << ",f" << k;
  out << '\n';
  for (std::size_t i = 0; i < features.size(); ++i) {
    out << features.labels[i];
    for (std::size_t k = 0; k < f; ++k) out << ',' << detail::format_double(features.rows.at(i, k));
    out << '\n';
  }
}

Pca2d pca2d(const FeatureMatrix& features) {
  const std::size_t n = features.size(), f = features.dim();
  if (n < 2) throw UsageError("pca2d needs at least 2 rows");
  if (f < 1) throw UsageError("pca2d needs at least 1 feature column");
  const double* rows = features.rows.raw();

  std::vector<double> mean(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < f; ++k) mean[k] += rows[i * f + k];
  for (double& m : mean) m /= static_cast<double>(n);
  std::vector<double> centered(n * f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < f; ++k) centered[i * f + k] = rows[i * f + k] - mean[k];

  std::vector<double> cov(f * f, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = centered.data() + i * f;
    for (std::size_t a = 0; a < f; ++a)
      for (std::size_t b = a; b < f; ++b) cov[a * f + b] += x[a] * x[b];
  }
  for (std::size_t a = 0; a < f; ++a)
    for (std::size_t b = a; b < f; ++b) cov[b * f + a] = cov[a * f + b] /= static_cast<double>(n);

  double trace = 0.0;
  for (std::size_t a = 0; a < f; ++a) trace += cov[a * f + a];
  // Below this norm an iterate is round-off and the remaining spectrum is zero.
  const double floor = 1e-12 * trace;

  Pca2d out;
  Rng rng(derive_seed(0, {0x5043}));
  std::vector<double> tmp(f);
  for (std::size_t comp = 0; comp < 2; ++comp) {
    std::vector<double> v(f);
    for (double& x : v) x = rng.normal();
    auto orthonormalize = [&](std::vector<double>& u, double min_norm) {
      // Two projection passes keep the result orthogonal to working precision.
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& prev : out.components) {
          double d = 0.0;
          for (std::size_t k = 0; k < f; ++k) d += u[k] * prev[k];
          for (std::size_t k = 0; k < f; ++k) u[k] -= d * prev[k];
        }
      }
      double nrm = 0.0;
      for (double x : u) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm <= min_norm) return false;
      for (double& x : u) x /= nrm;
      return true;
    };
    // A fully deflated direction (f == 1 or a rank-1 matrix) keeps the
    // starting vector with eigenvalue 0.
    if (!orthonormalize(v, 0.0)) v.assign(f, 0.0);
    double eigenvalue = 0.0;
    for (int iter = 0; iter < 1'000'000; ++iter) {
      for (std::size_t a = 0; a < f; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < f; ++b) acc += cov[a * f + b] * v[b];
        tmp[a] = acc;
      }
      double rayleigh = 0.0;
      for (std::size_t k = 0; k < f; ++k) rayleigh += tmp[k] * v[k];
      eigenvalue = rayleigh;
      std::vector<double> next = tmp;
      if (!orthonormalize(next, floor)) {
        eigenvalue = 0.0;
        break;
      }
      double diff = 0.0;
      for (std::size_t k = 0; k < f; ++k) diff = std::max(diff, std::abs(next[k] - v[k]));
      v = std::move(next);
      if (diff <= 1e-10) break;
    }
    // Sign convention: the largest-magnitude entry is positive.
    std::size_t arg = 0;
    for (std::size_t k = 1; k < f; ++k)
      if (std::abs(v[k]) > std::abs(v[arg])) arg = k;
    if (v[arg] < 0)
      for (double& x : v) x = -x;
    // Deflate so the next power iteration finds the following component.
    for (std::size_t a = 0; a < f; ++a)
      for (std::size_t b = 0; b < f; ++b) cov[a * f + b] -= eigenvalue * v[a] * v[b];
    out.variances.push_back(eigenvalue);
    out.components.push_back(std::move(v));
  }

  out.coords = Tensor(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = centered.data() + i * f;
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < f; ++k) acc += x[k] * out.components[c][k];
      out.coords.raw()[i * 2 + c] = acc;
    }
  }
  return out;
}

void write_embedding2d_csv(const std::filesystem::path& path, const FeatureMatrix& features, const Pca2d& pca) {
  auto out = open_csv(path);
  out << "label,x,y\n";
  for (std::size_t i = 0; i < features.size(); ++i) {
    out << features.labels[i] << ',' << detail::format_double(pca.coords.at(i, 0)) << ','
        << detail::format_double(pca.coords.at(i, 1)) << '\n';
  }
}

}  // namespace pointmoment
