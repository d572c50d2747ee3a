#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lcdlab/config.hpp"
#include "lcdlab/control.hpp"
#include "lcdlab/data.hpp"
#include "lcdlab/distill.hpp"

namespace lcdlab {

/// Samples drawn for monitoring. `latents` live in model space; `images` are
/// decoded. `cond_maps` is set only for control runs.
struct Preview {
  Tensor latents;
  Tensor images;
  Tensor cond_maps;
};

/// One training job (teacher, LCD or ControlNet) over a fixed dataset.
///
/// Update `index` (0-based) draws its batch and randomness purely from
/// (train.seed, index), so a trainer restored from a checkpoint taken after
/// update i-1 reproduces update i exactly.
class Trainer {
 public:
  virtual ~Trainer() = default;
  virtual TrainKind kind() const = 0;
  virtual StepResult step(std::int64_t index) = 0;
  /// Every tensor needed to resume: parameters, optimizer moments, counters.
  virtual std::vector<NamedTensor> state_tensors() const = 0;
  virtual void load_state(const std::vector<NamedTensor>& tensors) = 0;
  virtual Preview preview(int count, std::uint64_t seed) const = 0;
  /// Parameters that must never change during this job (frozen teacher/base).
  virtual std::vector<NamedTensor> frozen_parameters() const { return {}; }

  float lr() const { return lr_; }
  std::int64_t steps_done() const { return steps_done_; }

 protected:
  Trainer(const Config& config, const ToyDataset& dataset);
  /// Encoded dataset rows for a batch.
  Tensor batch_latents(const std::vector<int>& indices) const;
  std::vector<int> batch_indices(std::int64_t index) const;
  Rng step_rng(std::int64_t index) const;

  Config config_;
  NoiseSchedule schedule_;
  Encoder encoder_;
  std::vector<float> latents_;  // [N, s, s] encoded dataset
  std::vector<int> labels_;
  int latent_size_;
  BatchStream batches_;
  float lr_;
  std::int64_t steps_done_ = 0;
};

std::unique_ptr<Trainer> make_trainer(const Config& config, const ToyDataset& dataset);

/// Loads the `model.*` tensors of a checkpoint into a fresh denoiser.
DiffusionTransformer load_denoiser(const DenoiserConfig& config, const std::filesystem::path& checkpoint,
                                   const std::string& prefix = "model.");

/// Either generates the toy dataset from the config or loads `data.path`.
ToyDataset load_or_generate_dataset(const Config& config);

struct MetricsRow {
  std::int64_t step = 0;
  double wall_ms = 0.0;
  float loss = 0.0F;
  float lr = 0.0F;
  double grad_norm = 0.0;
};

struct RunOptions {
  /// Stop (as if interrupted) once this many updates have been done in total.
  std::optional<std::int64_t> stop_after;
  std::function<void(const MetricsRow&)> on_step;
};

struct RunResult {
  std::filesystem::path out_dir;
  std::int64_t start_step = 0;
  std::int64_t final_step = 0;
  std::vector<MetricsRow> rows;  // rows produced by this invocation
  /// (step, mean edge IoU of previews) for control runs.
  std::vector<std::pair<std::int64_t, double>> edge_iou_curve;
  /// parameter_checksum of the frozen teacher/base at start and end (lcd, controlnet).
  std::optional<std::uint64_t> frozen_checksum_before;
  std::optional<std::uint64_t> frozen_checksum_after;
};

/// Runs the configured job. The out directory receives effective-config.json,
/// metrics.csv (step, wall_ms, loss, lr, grad_norm), checkpoints/ (latest,
/// periodic, final) and samples/ (PGM grids at step 0 and every
/// `sample_every`). Runs with a frozen teacher/base also write
/// frozen-checksum.json {"before", "after"} and throw if the two differ.
/// With train.resume set and checkpoints/latest.pxdl
/// present, training continues from it and metrics rows past that step are
/// discarded. A non-finite loss aborts the run; the last checkpoint stays.
RunResult run_training(const Config& config, const ToyDataset& dataset, const RunOptions& options = {});

std::string metrics_csv_header();
std::string format_metrics_row(const MetricsRow& row);

}  // namespace lcdlab
