#include "pointmoment/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <optional>

#include "detail/util.hpp"
#include "pointmoment/bench.hpp"
#include "pointmoment/config.hpp"
#include "pointmoment/error.hpp"
#include "pointmoment/evaluation.hpp"
#include "pointmoment/gradcheck.hpp"
#include "pointmoment/moments.hpp"
#include "pointmoment/random.hpp"
#include "pointmoment/training.hpp"

namespace pointmoment::cli {
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;
};

std::string keys_footer() {
  std::string s = "Config keys (key=value lines in --config, or --set key=value):\n";
  for (const auto& k : config_keys()) {
    s += "  " + k.key;
    s += std::string(k.key.size() < 26 ? 26 - k.key.size() : 1, ' ');
    s += k.help + "\n";
  }
  return s;
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& description, CommonFlags& flags) {
  CLI::App* sub = app.add_subcommand(name, description);
  sub->add_option("--config", flags.config, "key=value config file");
  sub->add_option("--seed", flags.seed, "run seed (overrides the config file)");
  sub->add_option("--out", flags.out, "output directory")->capture_default_str();
  sub->add_option("--threads", flags.threads, "worker thread cap (default 1)");
  sub->add_option("--set", flags.overrides, "override one config key, key=value (repeatable)");
  sub->footer(keys_footer());
  return sub;
}

RunConfig resolve_config(const CommonFlags& flags) {
  RunConfig config;
  if (!flags.config.empty()) apply_config(config, KeyValues::load(flags.config));
  KeyValues cli;
  for (const auto& kv : flags.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    cli.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  apply_config(config, cli);
  if (flags.threads) config.train.threads = *flags.threads;
  if (config.train.threads == 0) throw UsageError("--threads must be >= 1");
  return config;
}

Dataset normalized(Dataset d) {
  for (auto& pc : d.clouds) pc = normalize_unit_sphere(pc);
  return d;
}

std::pair<Dataset, Dataset> load_datasets(const RunConfig& config) {
  if (!config.data.dir.empty()) {
    Dataset train = normalized(load_xyz_dir(config.data.dir / "train"));
    Dataset test = normalized(load_xyz_dir(config.data.dir / "test"));
    if (train.class_names != test.class_names) {
      throw DataError("train and test splits under " + config.data.dir.string() + " have different classes");
    }
    return {std::move(train), std::move(test)};
  }
  CorpusSpec test_spec = config.data.corpus;
  test_spec.per_class = config.data.test_per_class;
  return {generate_corpus(config.data.corpus, config.data.seed, "train"),
          generate_corpus(test_spec, config.data.seed, "test")};
}

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create output directory " + out.string() + ": " + ec.message());
}

std::string pct(double accuracy) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * accuracy);
  return buf;
}

int cmd_gen_data(const CommonFlags& flags, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  if (flags.seed) config.data.seed = *flags.seed;
  const fs::path root = flags.out;
  auto [train, test] = load_datasets(config);
  write_xyz_dir(root / "train", train);
  write_xyz_dir(root / "test", test);
  out << "wrote " << train.clouds.size() << " train and " << test.clouds.size() << " test clouds under "
      << root.string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const CommonFlags& flags, const std::string& resume, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  if (flags.seed) config.train.seed = *flags.seed;
  const fs::path root = flags.out;
  prepare_out(root);
  if (config.train.metrics_path.empty()) config.train.metrics_path = root / "metrics.csv";
  if (config.train.checkpoint_dir.empty()) config.train.checkpoint_dir = root / "checkpoints";
  const auto [train, test] = load_datasets(config);

  std::optional<TrainState> state;
  if (!resume.empty()) {
    state = load_checkpoint(resume);
    if (flags.seed && state->seed != *flags.seed) {
      throw UsageError("--seed differs from the seed stored in " + resume);
    }
    config.train.seed = state->seed;
  }
  TrainHooks hooks;
  hooks.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << " eff_rank " << detail::format_double(r.eff_rank) << " mean_dim_std "
        << detail::format_double(r.mean_dim_std) << "\n";
  };
  const TrainState final_state = pretrain(config.train, train, std::move(state), hooks);
  out << "trained " << final_state.step << " steps; checkpoint "
      << (config.train.checkpoint_dir / "final.pmnt").string() << "\n";
  return kExitOk;
}

int cmd_probe(const CommonFlags& flags, const std::string& checkpoint, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  if (flags.seed) config.probe.seed = *flags.seed;
  const fs::path root = flags.out;
  prepare_out(root);
  const TrainState state = load_checkpoint(checkpoint);
  const auto [train, test] = load_datasets(config);
  const auto train_features = extract_features(state.params, train, config.train.threads);
  const auto test_features = extract_features(state.params, test, config.train.threads);
  const auto clf = train_linear_probe(train_features, config.probe);
  const ProbeResult r = evaluate_probe(clf, test_features);

  std::ofstream csv(root / "probe.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write " + (root / "probe.csv").string());
  csv << "class,correct,total,accuracy\n";
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    std::size_t total = 0;
    for (auto v : r.confusion[c]) total += v;
    const std::string name = c < test.class_names.size() ? test.class_names[c] : std::to_string(c);
    csv << name << ',' << r.confusion[c][c] << ',' << total << ',' << detail::format_double(r.per_class_accuracy[c])
        << '\n';
  }
  csv << "all," << r.correct << ',' << r.total << ',' << detail::format_double(r.accuracy) << '\n';

  std::ofstream conf(root / "confusion.csv", std::ios::trunc);
  conf << "true\\predicted";
  for (std::size_t c = 0; c < r.confusion.size(); ++c) conf << ',' << c;
  conf << '\n';
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    conf << c;
    for (auto v : r.confusion[c]) conf << ',' << v;
    conf << '\n';
  }
  out << "probe accuracy " << pct(r.accuracy) << " (" << r.correct << "/" << r.total << ")\n";
  return kExitOk;
}

int cmd_ablate(const CommonFlags& flags, std::vector<std::uint64_t> seeds, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  if (flags.seed) config.train.seed = *flags.seed;
  if (seeds.empty()) seeds = {config.train.seed, config.train.seed + 1, config.train.seed + 2};
  const fs::path root = flags.out;
  prepare_out(root);
  const auto [train, test] = load_datasets(config);
  const auto rows = ablation_suite(config.train, train, test, config.probe, seeds);
  write_ablation_csv(root / "ablation.csv", rows);
  for (const auto& r : rows) {
    out << "seed " << r.seed << " TI" << (r.order2 ? "+K2" : "") << (r.order3 ? "+K3" : "") << " accuracy "
        << pct(r.accuracy) << " eff_rank " << detail::format_double(r.effective_rank) << "\n";
  }
  return kExitOk;
}

int cmd_sweep(const CommonFlags& flags, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  if (flags.seed) config.train.seed = *flags.seed;
  const fs::path root = flags.out;
  prepare_out(root);
  const auto [train, test] = load_datasets(config);
  const auto rows = lambda_sweep(config.train, train, test, config.probe, config.sweep_lambdas);
  write_sweep_csv(root / "lambda_sweep.csv", rows);
  for (const auto& r : rows) out << "lambda " << detail::format_double(r.lambda) << " accuracy " << pct(r.accuracy) << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CommonFlags& flags, std::size_t op_trials, std::size_t pipeline_trials, std::ostream& out) {
  resolve_config(flags);
  GradCheckOptions options;
  if (flags.seed) options.seed = *flags.seed;
  options.op_trials = op_trials;
  options.pipeline_trials = pipeline_trials;
  const auto results = run_gradcheck_suite(options);
  bool ok = true;
  for (const auto& r : results) {
    out << format_gradcheck_line(r) << "\n";
    ok = ok && r.passed;
  }
  out << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? kExitOk : kExitVerification;
}

int cmd_bench(const CommonFlags& flags, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  if (flags.seed) config.train.seed = *flags.seed;
  const fs::path root = flags.out;
  prepare_out(root);
  std::ofstream csv(root / "bench.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write " + (root / "bench.csv").string());
  csv << "B,D,orders,terms,wall_seconds,terms_per_second\n";
  for (const std::size_t b : config.bench.batch_sizes) {
    for (const std::size_t d : config.bench.dims) {
      for (const auto& orders : config.bench.order_sets) {
        MomentSpec spec = config.train.spec;
        spec.orders = orders;
        const RrTiming t = time_rr_loss(b, d, spec, config.bench.repeats, config.train.seed);
        const std::uint64_t terms = t.terms;
        const double wall = t.wall_seconds;
        const double rate = t.terms_per_second();
        csv << b << ',' << d << ",\"" << format_orders(orders) << "\"," << terms << ','
            << detail::format_double(wall) << ',' << detail::format_double(rate) << '\n';
        out << "B=" << b << " D=" << d << " orders=" << format_orders(orders) << " terms=" << terms
            << " wall=" << detail::format_double(wall) << "s terms/s=" << detail::format_double(rate) << "\n";
      }
    }
  }
  return kExitOk;
}

int cmd_export(const CommonFlags& flags, const std::string& checkpoint, const std::string& split, std::ostream& out) {
  RunConfig config = resolve_config(flags);
  const fs::path root = flags.out;
  prepare_out(root);
  const TrainState state = load_checkpoint(checkpoint);
  const auto [train, test] = load_datasets(config);
  const Dataset& data = split == "train" ? train : test;
  const auto features = extract_features(state.params, data, config.train.threads);
  write_features_csv(root / "features.csv", features);
  const Pca2d pca = pca2d(features);
  write_embedding2d_csv(root / "embedding2d.csv", features, pca);
  out << "exported " << features.size() << " " << split << " features; PCA variances "
      << detail::format_double(pca.variances[0]) << ", " << detail::format_double(pca.variances[1]) << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"PointMoment: self-supervised point-cloud pre-training and evaluation", "pmnt"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* gen = add_command(app, "gen-data", "write a synthetic .xyz corpus to <out>/train and <out>/test", flags);
  std::string resume;
  auto* pre = add_command(app, "pretrain", "pre-train the encoder; writes metrics CSVs and checkpoints", flags);
  pre->add_option("--resume", resume, "checkpoint to resume from");
  std::string checkpoint;
  auto* probe = add_command(app, "probe", "linear-probe a checkpoint; writes probe.csv and confusion.csv", flags);
  probe->add_option("--checkpoint", checkpoint, "trained checkpoint (.pmnt)")->required();
  std::vector<std::uint64_t> seeds;
  auto* ablate = add_command(app, "ablate", "TI / +order 2 / +orders 2,3 per seed; writes ablation.csv", flags);
  ablate->add_option("--seeds", seeds, "training seeds (default: seed, seed+1, seed+2)");
  auto* sweep = add_command(app, "sweep-lambda", "one run per sweep.lambdas entry; writes lambda_sweep.csv", flags);
  std::size_t op_trials = GradCheckOptions{}.op_trials, pipeline_trials = GradCheckOptions{}.pipeline_trials;
  auto* grad = add_command(app, "gradcheck", "finite-difference check of every op and the loss pipeline", flags);
  grad->add_option("--op-trials", op_trials, "random trials per elementary op")->capture_default_str();
  grad->add_option("--pipeline-trials", pipeline_trials, "random configurations per composite check")
      ->capture_default_str();
  auto* bench = add_command(app, "bench", "time rr_loss over the bench grid; writes bench.csv", flags);
  std::string split = "test";
  auto* exp = add_command(app, "export", "write features.csv and embedding2d.csv for a checkpoint", flags);
  exp->add_option("--checkpoint", checkpoint, "trained checkpoint (.pmnt)")->required();
  exp->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::ostringstream help_out, err_out;
    const int code = app.exit(e, help_out, err_out);
    out << help_out.str();
    err << err_out.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(flags, out);
    if (pre->parsed()) return cmd_pretrain(flags, resume, out);
    if (probe->parsed()) return cmd_probe(flags, checkpoint, out);
    if (ablate->parsed()) return cmd_ablate(flags, seeds, out);
    if (sweep->parsed()) return cmd_sweep(flags, out);
    if (grad->parsed()) return cmd_gradcheck(flags, op_trials, pipeline_trials, out);
    if (bench->parsed()) return cmd_bench(flags, out);
    if (exp->parsed()) return cmd_export(flags, checkpoint, split, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const VerificationError& e) {
    err << "verification failed: " << e.what() << "\n";
    return kExitVerification;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "file error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace pointmoment::cli
