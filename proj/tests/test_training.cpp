#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pointmoment/checkpoint.hpp"
#include "pointmoment/collapse.hpp"
#include "pointmoment/error.hpp"
#include "pointmoment/random.hpp"
#include "pointmoment/training.hpp"

using namespace pointmoment;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("pm_unit_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

Dataset tiny_data(std::size_t per_class = 4) {
  CorpusSpec spec;
  spec.classes = {ShapeKind::Sphere, ShapeKind::Cube};
  spec.per_class = per_class;
  spec.n_points = 24;
  return generate_corpus(spec, 3, "train");
}

TrainConfig tiny_config(const fs::path& dir) {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.seed = 17;
  c.encoder.point_mlp_widths = {3, 8, 8};
  c.encoder.feature_dim = 8;
  c.encoder.projector_hidden = 8;
  c.encoder.embed_dim = 4;
  c.metrics_path = dir / "metrics.csv";
  c.checkpoint_dir = dir / "ckpt";
  return c;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  return ev;
}

}  // namespace

TEST_CASE("collapse metrics edge cases") {
  Tensor same(Shape{6, 4});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) same.at(r, c) = 0.25 * static_cast<double>(c) - 1.0;
  const auto rep = collapse_metrics(same);
  CHECK(rep.effective_rank == doctest::Approx(1.0).epsilon(1e-6));
  for (double s : rep.per_dim_std) CHECK(s == 0.0);

  // +-s e_i rows excite every direction equally.
  Tensor block(Shape{10, 5});
  for (std::size_t i = 0; i < 5; ++i) {
    block.at(2 * i, i) = 3.0;
    block.at(2 * i + 1, i) = -3.0;
  }
  CHECK(collapse_metrics(block).effective_rank == doctest::Approx(5.0).epsilon(1e-6));
  CHECK_THROWS_AS(collapse_metrics(Tensor(Shape{1, 3})), UsageError);
  CHECK(effective_rank_from_singular_values({}) == 1.0);
}

TEST_CASE("effective rank matches an independent eigen oracle") {
  Rng rng(31);
  Tensor z(Shape{64, 16});
  for (double& v : z.data()) v = rng.normal();
  const auto rep = collapse_metrics(z);

  std::vector<double> mean(16, 0.0);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 16; ++c) mean[c] += z.at(r, c) / 64.0;
  std::vector<std::vector<double>> gram(16, std::vector<double>(16, 0.0));
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t p = 0; p < 16; ++p)
      for (std::size_t q = 0; q < 16; ++q) gram[p][q] += (z.at(r, p) - mean[p]) * (z.at(r, q) - mean[q]);
  double total = 0.0, entropy = 0.0;
  std::vector<double> sv;
  for (double e : jacobi_eigenvalues(gram)) sv.push_back(std::sqrt(std::max(e, 0.0)));
  for (double s : sv) total += s;
  for (double s : sv) entropy -= (s / total) * std::log(s / total);
  CHECK(std::abs(rep.effective_rank - std::exp(entropy)) <= 1e-9);
  CHECK(rep.effective_rank >= 1.0);
  CHECK(rep.effective_rank <= 16.0);
  double mean_std = 0.0;
  for (double s : rep.per_dim_std) mean_std += s / 16.0;
  CHECK(rep.mean_dim_std() == doctest::Approx(mean_std).epsilon(1e-15));
}

TEST_CASE("batch counting drops a trailing single cloud") {
  CHECK(batches_per_epoch(8, 4) == 2);
  CHECK(batches_per_epoch(9, 4) == 2);
  CHECK(batches_per_epoch(10, 4) == 3);
  CHECK(batches_per_epoch(1600, 32) == 50);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.spec.orders = {2, 3, 17};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(TrainConfig{}.spec.branch_mode == BranchMode::Single);
}

TEST_CASE("one epoch on eight clouds writes two step rows") {
  const auto dir = fresh_dir("train_rows");
  const TrainConfig c = tiny_config(dir);
  std::vector<StepRecord> steps;
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { steps.push_back(r); };
  const TrainState s = pretrain(c, tiny_data(), std::nullopt, hooks);
  const auto rows = lines(c.metrics_path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == kStepMetricsHeader);
  CHECK(rows[1].rfind("0,", 0) == 0);
  CHECK(steps.size() == 2);
  CHECK(steps[0].lr == c.lr_init);
  CHECK(s.step == 2);
  CHECK(s.epoch == 1);
  const auto epochs = lines(c.epoch_metrics_path());
  REQUIRE(epochs.size() == 2);
  CHECK(epochs[0] == kEpochMetricsHeader);
  CHECK(c.epoch_metrics_path().filename() == "metrics_epochs.csv");
  CHECK(fs::exists(c.checkpoint_dir / "final.pmnt"));
}

TEST_CASE("identical runs are bitwise identical") {
  const auto a = fresh_dir("train_det_a"), b = fresh_dir("train_det_b");
  TrainConfig ca = tiny_config(a), cb = tiny_config(b);
  ca.epochs = cb.epochs = 3;
  pretrain(ca, tiny_data(5));
  pretrain(cb, tiny_data(5));
  CHECK(slurp(ca.metrics_path) == slurp(cb.metrics_path));
  CHECK(slurp(ca.epoch_metrics_path()) == slurp(cb.epoch_metrics_path()));
  CHECK(slurp(ca.checkpoint_dir / "final.pmnt") == slurp(cb.checkpoint_dir / "final.pmnt"));

  TrainConfig cc = tiny_config(fresh_dir("train_det_c"));
  cc.epochs = 3;
  cc.seed = 18;
  pretrain(cc, tiny_data(5));
  CHECK(slurp(ca.metrics_path) != slurp(cc.metrics_path));
}

TEST_CASE("resume reproduces the uninterrupted run") {
  const auto dir = fresh_dir("train_resume");
  TrainConfig full = tiny_config(dir / "full");
  full.epochs = 4;
  full.checkpoint_every = 2;
  full.spec.branch_mode = BranchMode::Single;
  pretrain(full, tiny_data(5));
  CHECK(fs::exists(full.checkpoint_dir / "epoch_0002.pmnt"));

  TrainConfig rest = full;
  rest.metrics_path = dir / "rest" / "metrics.csv";
  rest.checkpoint_dir = dir / "rest" / "ckpt";
  TrainState mid = load_checkpoint(full.checkpoint_dir / "epoch_0002.pmnt");
  CHECK(mid.epoch == 2);
  pretrain(rest, tiny_data(5), std::move(mid));

  const auto a = lines(full.metrics_path);
  const auto b = lines(rest.metrics_path);
  // 10 clouds at B=4 give 3 steps per epoch; the resumed file has epochs 3-4 only.
  REQUIRE(a.size() == 1 + 12);
  REQUIRE(b.size() == 1 + 6);
  CHECK(b[0] == a[0]);
  for (std::size_t i = 1; i < 7; ++i) CHECK(b[i] == a[6 + i]);
  CHECK(slurp(full.checkpoint_dir / "final.pmnt") == slurp(rest.checkpoint_dir / "final.pmnt"));
  const auto ea = lines(full.epoch_metrics_path()), eb = lines(rest.epoch_metrics_path());
  REQUIRE(eb.size() == 3);
  CHECK(eb[1] == ea[3]);
  CHECK(eb[2] == ea[4]);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = fresh_dir("train_ckpt");
  const TrainConfig c = tiny_config(dir);
  const TrainState s = pretrain(c, tiny_data());
  const auto path = dir / "copy.pmnt";
  save_checkpoint(s, c, path);
  const TrainState back = load_checkpoint(path);
  const auto p = s.params.named(), q = back.params.named();
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i].second.value() == q[i].second.value());
  CHECK(back.step == s.step);
  CHECK(back.seed == 17);
  CHECK(back.adam.step_count() == s.adam.step_count());
  CHECK(checkpoint_config_text(path).find("spec.lambda=0.5") != std::string::npos);

  const std::string bytes = slurp(path);
  std::ofstream(dir / "trunc.pmnt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.pmnt"), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.pmnt", std::ios::binary) << bad;
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.pmnt"), FormatError);

  // A bare parameter file is not a training state.
  Checkpoint plain;
  plain.tensors = s.params.to_named_tensors();
  write_pmnt(dir / "plain.pmnt", plain);
  CHECK_THROWS_AS(load_checkpoint(dir / "plain.pmnt"), FormatError);
}

TEST_CASE("divergence aborts with the batch seed") {
  const auto dir = fresh_dir("train_nan");
  TrainConfig c = tiny_config(dir);
  c.epochs = 3;
  c.lr_init = 1e300;
  try {
    pretrain(c, tiny_data());
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("seed 17") != std::string::npos);
  }
}

TEST_CASE("embeddings of a dataset") {
  Rng rng(5);
  const TrainConfig c = tiny_config(fresh_dir("train_embed"));
  const ModelParams p = init_params(c.encoder, rng);
  const Tensor z = embed_dataset(p, tiny_data());
  CHECK(z.shape() == Shape{8, 4});
  CHECK(z.all_finite());
}
