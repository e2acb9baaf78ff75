#pragma once

// Two-view self-supervised pre-training loop.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pointmoment/collapse.hpp"
#include "pointmoment/geometry.hpp"
#include "pointmoment/model.hpp"
#include "pointmoment/moments.hpp"
#include "pointmoment/optim.hpp"

namespace pointmoment {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr_init = 1e-3;
  double lr_min = 0.0;
  double weight_decay = 1e-6;
  std::uint64_t seed = 0;
  MomentSpec spec;
  AugmentationPolicy aug;
  EncoderConfig encoder;
  // Save a checkpoint every this many epochs (0 disables periodic saves).
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  // Per-step rows. Per-epoch rows go to the sibling file epoch_metrics_path().
  std::filesystem::path metrics_path;
  std::size_t threads = 1;

  std::filesystem::path epoch_metrics_path() const;
  // Throws ConfigError.
  void validate() const;
};

struct TrainState {
  ModelParams params;
  AdamState adam;
  std::uint64_t step = 0;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double eff_rank = 0.0;
  double mean_dim_std = 0.0;
};

// Observers for in-process consumers (tests, harnesses); metrics files are
// written regardless.
struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

inline constexpr const char* kStepMetricsHeader = "step,lr,loss_total,loss_ti,loss_rr,rr_order2,rr_order3";
inline constexpr const char* kEpochMetricsHeader = "epoch,eff_rank,mean_dim_std";

std::string format_step_row(const StepRecord& r);
std::string format_epoch_row(const EpochRecord& r);

TrainState init_train_state(const TrainConfig& config);

// Runs epochs state.epoch+1 .. config.epochs. Pass a loaded checkpoint to
// resume; metrics files are appended to when resuming and truncated otherwise.
// A non-finite loss aborts with NumericError naming epoch, batch and seed.
TrainState pretrain(const TrainConfig& config, const Dataset& data, std::optional<TrainState> resume = std::nullopt,
                    const TrainHooks& hooks = {});

// Number of optimizer steps per epoch (a trailing batch of fewer than 2 clouds is dropped).
std::size_t batches_per_epoch(std::size_t dataset_size, std::size_t batch_size);

// Projector embeddings of unaugmented clouds, [n, embed_dim].
Tensor embed_dataset(const ModelParams& params, const Dataset& data);

// The config is stored in the checkpoint so load_checkpoint can rebuild shapes.
void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
// Config text embedded in a checkpoint (key=value lines).
std::string checkpoint_config_text(const std::filesystem::path& path);

}  // namespace pointmoment
