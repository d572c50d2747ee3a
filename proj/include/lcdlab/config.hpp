#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcdlab/control.hpp"
#include "lcdlab/data.hpp"
#include "lcdlab/distill.hpp"
#include "lcdlab/model.hpp"
#include "lcdlab/schedule.hpp"

namespace lcdlab {

enum class TrainKind { Teacher, LCD, ControlNet };
std::string to_string(TrainKind kind);
TrainKind train_kind_from_string(const std::string& name);

struct ScheduleSection {
  ScheduleKind kind = ScheduleKind::Linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int T = 1000;
};

/// Optional fields left unset take a per-kind default (see `resolved_*`).
struct TrainSection {
  TrainKind kind = TrainKind::Teacher;
  std::optional<float> lr;
  std::optional<int> batch;
  std::optional<int> steps;
  std::uint64_t seed = 0;
  int sample_every = 1000;
  int checkpoint_every = 1000;
  int sample_count = 16;
  float p_drop = 0.1F;
  float weight_decay = 0.0F;
  std::string teacher;  // checkpoint of the frozen teacher/base (lcd, controlnet)
  bool resume = false;
  bool log_wall_time = true;
};

struct LcdSection {
  float omega_fix = 4.5F;
  int k = 20;
  float mu = 0.95F;
  DistanceKind distance = DistanceKind::PseudoHuber;
  float huber_delta = 1e-3F;
};

struct ControlSection {
  ControlVariant variant = ControlVariant::Transformer;
  std::optional<int> n_copy;  // default: default_n_copy(depth)
  int accumulation = 4;
  float edge_threshold = 0.3F;
  float guidance = 0.0F;  // CFG scale for conditional samples
};

struct DataSection {
  std::int64_t n_samples = 4096;
  int image_size = 16;
  int num_classes = 4;
  std::optional<std::uint64_t> seed;  // default: derived from train.seed
  EncoderKind encoder = EncoderKind::Identity;
  std::string path;  // load a `gen-data` directory instead of generating
};

struct IoSection {
  std::string out_dir;  // empty: $LCDLAB_OUT, then "runs/<kind>"
};

struct Config {
  DenoiserConfig model;
  ScheduleSection schedule;
  TrainSection train;
  LcdSection lcd;
  ControlSection control;
  DataSection data;
  IoSection io;

  /// Throws ConfigError on any inconsistency.
  void validate() const;

  NoiseSchedule make_schedule() const;
  ToyDatasetSpec dataset_spec() const;
  Encoder encoder() const { return Encoder{data.encoder}; }
  float resolved_lr() const;
  int resolved_batch() const;
  int resolved_steps() const;
  int resolved_n_copy() const;
  LCDConfig lcd_config() const;
  std::filesystem::path resolved_out_dir() const;
};

/// Seed of a named component: splitmix64(root ^ fnv1a64(name)).
std::uint64_t derive_seed(std::uint64_t root, const std::string& component);

nlohmann::json config_to_json(const Config& config);
/// Strict conversion: unknown sections/keys and type mismatches throw ConfigError.
Config config_from_json(const nlohmann::json& j);

/// A `--section.key value` override. Dashes in the key map to underscores.
struct ConfigOverride {
  std::string path;  // "section.key"
  std::string value;
};

/// defaults <- file (if non-empty) <- overrides, then validated.
Config load_config(const std::filesystem::path& file, const std::vector<ConfigOverride>& overrides);

}  // namespace lcdlab
