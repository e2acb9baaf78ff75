#include "pointmoment/training.hpp"

#include <fstream>
#include <numeric>

#include "detail/util.hpp"
#include "pointmoment/config.hpp"
#include "pointmoment/error.hpp"

namespace pointmoment {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAugmentStream = 0x4147;
constexpr std::uint64_t kBranchStream = 0x4252;
constexpr std::uint64_t kInitStream = 0x494e;

std::string order_component(const LossBreakdown& b, unsigned k) {
  const auto it = b.rr_by_order.find(k);
  return detail::format_double(it == b.rr_by_order.end() ? 0.0 : it->second);
}

std::ofstream open_metrics(const std::filesystem::path& path, bool append, const char* header) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // A resumed run writing to a fresh location still gets a header.
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw DataError("cannot open metrics file " + path.string());
  if (fresh) out << header << '\n';
  return out;
}

std::vector<PointCloud> augment_views(const Dataset& data, std::span<const std::size_t> indices,
                                      const TrainConfig& config, std::size_t epoch, std::size_t batch,
                                      std::uint64_t view) {
  std::vector<std::optional<PointCloud>> slots(indices.size());
  detail::parallel_for(indices.size(), config.threads, [&](std::size_t i) {
    Rng rng(derive_seed(config.seed, {kAugmentStream, epoch, batch, view, i}));
    slots[i] = augment(data.clouds[indices[i]], config.aug, rng);
  });
  std::vector<PointCloud> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

}  // namespace

std::filesystem::path TrainConfig::epoch_metrics_path() const {
  if (metrics_path.empty()) return {};
  auto p = metrics_path;
  p.replace_filename(metrics_path.stem().string() + "_epochs" + metrics_path.extension().string());
  return p;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(lr_init > 0.0) || !(lr_min >= 0.0) || lr_min > lr_init) {
    throw ConfigError("learning rates must satisfy 0 <= lr_min <= lr_init, lr_init > 0");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  encoder.validate();
  spec.validate(encoder.embed_dim);
  aug.validate();
}

std::size_t batches_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
  const std::size_t full = dataset_size / batch_size;
  return full + (dataset_size % batch_size >= 2 ? 1 : 0);
}

std::string format_step_row(const StepRecord& r) {
  using detail::format_double;
  return std::to_string(r.step) + "," + format_double(r.lr) + "," + format_double(r.loss.total) + "," +
         format_double(r.loss.ti) + "," + format_double(r.loss.rr) + "," + order_component(r.loss, 2) + "," +
         order_component(r.loss, 3);
}

std::string format_epoch_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + detail::format_double(r.eff_rank) + "," +
         detail::format_double(r.mean_dim_std);
}

TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, {kInitStream}));
  TrainState state;
  state.params = init_params(config.encoder, rng);
  AdamConfig ac;
  ac.weight_decay = config.weight_decay;
  ac.base_lr = config.lr_init;
  state.adam = AdamState(ac, state.params.shapes());
  state.seed = config.seed;
  return state;
}

TrainState pretrain(const TrainConfig& config, const Dataset& data, std::optional<TrainState> resume,
                    const TrainHooks& hooks) {
  config.validate();
  if (data.empty()) throw DataError("pretrain: dataset is empty");
  if (data.size() < 2) throw DataError("pretrain: need at least 2 clouds for a batch");

  const bool resuming = resume.has_value();
  TrainState state = resuming ? std::move(*resume) : init_train_state(config);
  if (resuming && state.params.config().embed_dim != config.encoder.embed_dim) {
    throw ConfigError("resume: checkpoint architecture does not match config");
  }

  const std::size_t n = data.size();
  const std::size_t per_epoch = batches_per_epoch(n, config.batch_size);
  const std::uint64_t total_steps = static_cast<std::uint64_t>(per_epoch) * config.epochs;

  std::ofstream step_out, epoch_out;
  if (!config.metrics_path.empty()) {
    step_out = open_metrics(config.metrics_path, resuming, kStepMetricsHeader);
    epoch_out = open_metrics(config.epoch_metrics_path(), resuming, kEpochMetricsHeader);
  }

  for (std::size_t epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(derive_seed(config.seed, {kShuffleStream, epoch})).shuffle(order.begin(), order.end());

    std::vector<double> epoch_z;
    std::size_t epoch_rows = 0;
    for (std::size_t batch = 0; batch < per_epoch; ++batch) {
      const std::size_t lo = batch * config.batch_size;
      const std::size_t hi = std::min(n, lo + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);

      StepRecord rec;
      try {
        const auto v1 = augment_views(data, idx, config, epoch, batch, 0);
        const auto v2 = augment_views(data, idx, config, epoch, batch, 1);
        ad::Var z1 = projector_forward(state.params, encode_batch(state.params, std::span<const PointCloud>(v1)));
        ad::Var z2 = projector_forward(state.params, encode_batch(state.params, std::span<const PointCloud>(v2)));
        Rng branch_rng(derive_seed(config.seed, {kBranchStream, epoch, batch}));
        TotalLoss loss = total_loss(z1, z2, config.spec, branch_rng);

        state.params.zero_grad();
        ad::backward(loss.loss);
        for (const Tensor* g : state.params.grads()) {
          if (!g->all_finite()) throw NumericError("non-finite gradient");
        }
        rec.step = state.step;
        rec.lr = cosine_lr(state.step, total_steps, config.lr_init, config.lr_min);
        rec.loss = loss.breakdown;
        const auto values = state.params.values();
        const auto grads = state.params.grads();
        state.adam.step(values, grads, rec.lr);

        const Tensor& zv = z1.value();
        epoch_z.insert(epoch_z.end(), zv.data().begin(), zv.data().end());
        epoch_rows += zv.dim(0);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + " (seed " + std::to_string(config.seed) +
                           ", augmentation stream derive_seed(seed, {" + std::to_string(kAugmentStream) + ", " +
                           std::to_string(epoch) + ", " + std::to_string(batch) + ", view, item}))");
      }
      ++state.step;
      if (step_out.is_open()) step_out << format_step_row(rec) << '\n';
      if (hooks.on_step) hooks.on_step(rec);
    }

    const CollapseReport report =
        collapse_metrics(Tensor(Shape{epoch_rows, config.encoder.embed_dim}, std::move(epoch_z)));
    const EpochRecord er{epoch, report.effective_rank, report.mean_dim_std()};
    if (epoch_out.is_open()) epoch_out << format_epoch_row(er) << '\n';
    if (hooks.on_epoch) hooks.on_epoch(er);
    state.epoch = epoch;

    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && !config.checkpoint_dir.empty()) {
      std::filesystem::create_directories(config.checkpoint_dir);
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu.pmnt", epoch);
      save_checkpoint(state, config, config.checkpoint_dir / name);
    }
  }
  step_out.flush();
  epoch_out.flush();
  if (!config.checkpoint_dir.empty()) {
    std::filesystem::create_directories(config.checkpoint_dir);
    save_checkpoint(state, config, config.checkpoint_dir / "final.pmnt");
  }
  return state;
}

Tensor embed_dataset(const ModelParams& params, const Dataset& data) {
  const ModelParams frozen = params.frozen();
  const std::size_t d = params.config().embed_dim;
  Tensor out(Shape{data.size(), d});
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < data.size(); lo += kChunk) {
    const std::size_t hi = std::min(data.size(), lo + kChunk);
    const std::span<const PointCloud> chunk(data.clouds.data() + lo, hi - lo);
    const Tensor z = projector_forward(frozen, encode_batch(frozen, chunk)).value();
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(lo * d));
  }
  return out;
}

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::filesystem::path& path) {
  Checkpoint ckpt;
  ckpt.tensors = state.params.to_named_tensors();
  const auto named = state.params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    ckpt.tensors.push_back({"adam.m." + named[i].first, state.adam.first_moments()[i]});
    ckpt.tensors.push_back({"adam.v." + named[i].first, state.adam.second_moments()[i]});
  }
  RunConfig rc;
  rc.train = config;
  // Output locations are not part of the model, so equal runs written to
  // different directories produce equal bytes.
  rc.train.checkpoint_dir.clear();
  rc.train.metrics_path.clear();
  ckpt.meta = {{"kind", "pointmoment.train_state"},
               {"step", std::to_string(state.step)},
               {"epoch", std::to_string(state.epoch)},
               {"adam_t", std::to_string(state.adam.step_count())},
               {"seed", std::to_string(state.seed)},
               {"config", format_config(rc)}};
  write_pmnt(path, ckpt);
}

std::string checkpoint_config_text(const std::filesystem::path& path) {
  return read_pmnt(path).meta_value("config");
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_pmnt(path);
  if (ckpt.meta_value("kind") != "pointmoment.train_state") throw FormatError("not a training checkpoint: " + path.string());

  RunConfig rc;
  try {
    apply_config(rc, KeyValues::parse(ckpt.meta_value("config"), path.string()));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  auto parse_u64 = [&](const char* key) {
    const std::string& v = ckpt.meta_value(key);
    try {
      std::size_t used = 0;
      const unsigned long long x = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(key);
      return static_cast<std::uint64_t>(x);
    } catch (const std::exception&) {
      throw FormatError(std::string("checkpoint metadata '") + key + "' is not an integer");
    }
  };

  TrainState state;
  state.params = ModelParams::from_named_tensors(rc.train.encoder, ckpt);
  AdamConfig ac;
  ac.weight_decay = rc.train.weight_decay;
  ac.base_lr = rc.train.lr_init;
  state.adam = AdamState(ac, state.params.shapes());
  const auto named = state.params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const Tensor& m = ckpt.tensor("adam.m." + named[i].first);
    const Tensor& v = ckpt.tensor("adam.v." + named[i].first);
    if (m.shape() != named[i].second.shape() || v.shape() != named[i].second.shape()) {
      throw FormatError("checkpoint optimizer state shape mismatch for " + named[i].first);
    }
    state.adam.first_moments()[i] = m;
    state.adam.second_moments()[i] = v;
  }
  state.adam.set_step_count(parse_u64("adam_t"));
  state.step = parse_u64("step");
  state.epoch = static_cast<std::size_t>(parse_u64("epoch"));
  state.seed = parse_u64("seed");
  return state;
}

}  // namespace pointmoment
