#pragma once

#include <cmath>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lcdlab/rng.hpp"
#include "lcdlab/tensor.hpp"

namespace lcdlab {

enum class ScheduleKind { Linear, ScaledLinear };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

/// Discrete-time variance-preserving noise schedule.
///
/// Timesteps are integers 0..T. t = 0 is clean data (alpha_bar = 1);
/// t = 1..T use beta_t interpolated between beta_start and beta_end, either
/// linearly or linearly in sqrt(beta) (ScaledLinear). Tables are computed in
/// double precision.
class NoiseSchedule {
 public:
  NoiseSchedule(ScheduleKind kind, double beta_start, double beta_end, int num_timesteps);

  ScheduleKind kind() const { return kind_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  int num_timesteps() const { return T_; }

  double beta(int t) const;       // 1 <= t <= T
  double alpha_bar(int t) const;  // 0 <= t <= T
  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar(t)); }
  double sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }
  /// ln(alpha_bar / (1 - alpha_bar)), 1 <= t <= T.
  double log_snr(int t) const;

  void check_timestep(int t, int lowest = 0) const;

 private:
  ScheduleKind kind_;
  double beta_start_;
  double beta_end_;
  int T_;
  std::vector<double> beta_;       // index t, beta_[0] unused
  std::vector<double> alpha_bar_;  // index t, alpha_bar_[0] = 1
};

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; one t for the batch.
Tensor add_noise(const NoiseSchedule& schedule, const Tensor& z0, const Tensor& eps, int t);
/// Per-sample timesteps along axis 0.
Tensor add_noise(const NoiseSchedule& schedule, const Tensor& z0, const Tensor& eps, std::span<const int> t);

/// Per-sample coefficient tensor of shape [B, 1, ..., 1] matching `like`'s rank.
Tensor per_sample_coeff(const Tensor& like, const std::vector<float>& values);

/// Admissible (t_{n+k}, t_n) training pairs for skipping interval k.
class SkipGrid {
 public:
  SkipGrid(int num_timesteps, int skip);

  int n_min() const { return 1; }
  int n_max() const { return T_ - k_; }
  int skip() const { return k_; }
  std::pair<int, int> pair(int n) const;
  /// Uniform n in [1, T - k].
  int sample_n(Rng& rng) const { return rng.uniform_int(n_min(), n_max()); }
  std::vector<std::pair<int, int>> all_pairs() const;

 private:
  int T_;
  int k_;
};

/// CSV with header `t,beta,alpha_bar,log_snr`, rows t = 1..T.
void write_schedule_csv(const NoiseSchedule& schedule, std::ostream& os);

}  // namespace lcdlab
