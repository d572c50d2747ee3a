#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcdlab/config.hpp"
#include "lcdlab/tensor.hpp"

namespace lcdlab {

struct MmdResult {
  double mmd2_unbiased = 0.0;  // may be slightly negative
  double mmd2_biased = 0.0;
  double bandwidth = 0.0;      // h in exp(-|x-y|^2 / (2 h^2))
  double reported() const { return mmd2_unbiased > 0.0 ? mmd2_unbiased : 0.0; }
};

/// Squared MMD between two image sets ([N, ...] each, flattened per row)
/// with an RBF kernel. Without a bandwidth, h^2 = median(|x-y|^2) / 2 over
/// all distinct pairs of the pooled set.
MmdResult mmd_rbf(const Tensor& x, const Tensor& y, std::optional<double> bandwidth = std::nullopt);

/// IoU between binarized Sobel edges of `generated` and the binarized
/// `cond_map` (both [S, S]); two empty masks count as a perfect match.
double edge_iou(std::span<const float> generated, std::span<const float> cond_map, int size, float threshold = 0.3F);
/// Mean edge IoU over a batch [B, S, S].
double mean_edge_iou(const Tensor& generated, const Tensor& cond_maps, float threshold = 0.3F);

/// First logged step whose value reaches halfway from the first value to the
/// best value; nullopt when the curve never improves.
std::optional<std::int64_t> sudden_converge_step(const std::vector<std::pair<std::int64_t, double>>& curve);

struct BenchResult {
  std::string sampler;
  int steps = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  int reps = 0;
};

/// `factory` builds everything a sampler needs (untimed) and returns the
/// per-sample call that is timed. Warmup calls are discarded. Throws when a
/// timed call spans fewer than 10 ticks of the clock.
BenchResult benchmark_sampler(const std::string& sampler, int steps,
                              const std::function<std::function<void()>()>& factory, int reps = 10, int warmup = 2);
std::string bench_csv(const std::vector<BenchResult>& rows);

/// Metric with enough metadata to re-run it.
struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::int64_t n_x = 0;
  std::int64_t n_y = 0;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  nlohmann::json to_json() const;
};

/// Hex FNV-1a of the canonical effective-config JSON.
std::string config_fingerprint(const Config& config);

enum class AblationKind { CfgScale, BatchSize, NCopy, Arch };
std::string to_string(AblationKind kind);
AblationKind ablation_kind_from_string(const std::string& name);

struct AblationRow {
  std::string kind;
  std::string config;
  std::int64_t step = 0;
  std::string metric;
  double value = 0.0;
};

struct AblationOptions {
  int budget = 200;        // training updates per configuration
  int eval_every = 100;    // metric checkpoints (plus step 0 and the end)
  int eval_samples = 64;
};

/// Named configurations of a sweep, derived from `base`. The n_copy grid is
/// {1, 4, 7, 13, 27} clipped to the model depth and de-duplicated.
std::vector<std::pair<std::string, Config>> ablation_configs(AblationKind kind, const Config& base);

/// Runs every configuration of the sweep on the same data and seed, writing
/// `<out>/ablation.csv` (kind, config, step, metric, value), per-update loss
/// curves in `<out>/curves.csv` (kind, config, step, loss) and a final sample
/// grid per configuration under `<out>/samples/`. Generation sweeps report
/// MMD² to the data; control sweeps report edge IoU. Needs train.teacher.
std::vector<AblationRow> ablation_report(AblationKind kind, const Config& base, const AblationOptions& options,
                                         const std::filesystem::path& out_dir);
std::string ablation_csv_header();
std::string format_ablation_row(const AblationRow& row);

}  // namespace lcdlab
