#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lcdlab/model.hpp"
#include "lcdlab/schedule.hpp"

namespace lcdlab {

/// f(z_t, t, c) -> x̂0, e.g. a bound `consistency_forward`.
using ConsistencyFn = std::function<Tensor(const Tensor& z, std::span<const int> t, std::span<const int> c)>;

enum class SolverKind { DDIM, Consistency };

std::string to_string(SolverKind kind);
SolverKind solver_kind_from_string(const std::string& name);

struct SamplerConfig {
  int steps = 4;
  float guidance = 0.0F;
  SolverKind kind = SolverKind::Consistency;
  std::uint64_t seed = 0;

  /// DDIM: 1 <= steps <= T. Consistency: 1 <= steps <= 8. guidance >= 0.
  void validate(int num_timesteps) const;
};

/// Evenly spaced integer ladder T = t_0 > t_1 > ... > t_steps = 0.
std::vector<int> sampling_ladder(int num_timesteps, int steps);

/// Deterministic DDIM update from a precomputed ε̂ (per-sample timesteps).
/// Rows with t_to == t_from are returned unchanged.
Tensor ddim_step_from_eps(const NoiseSchedule& schedule, const Tensor& z, std::span<const int> t_from,
                          std::span<const int> t_to, const Tensor& eps_hat);

/// One deterministic (η = 0) DDIM step from t_from to t_to.
Tensor ddim_step(const EpsFn& eps, const NoiseSchedule& schedule, const Tensor& z, std::span<const int> t_from,
                 std::span<const int> t_to, std::span<const int> c);

/// Solver increment Ψ = ddim_step(z) - z.
Tensor psi(const EpsFn& eps, const NoiseSchedule& schedule, const Tensor& z, std::span<const int> t_from,
           std::span<const int> t_to, std::span<const int> c);

/// Guided solver target z + (1+ω)Ψ(z, c) - ωΨ(z, ∅), evaluated without
/// recording a graph. The unconditional branch is skipped when ω = 0.
Tensor cfg_solved_target(const EpsFn& teacher, const NoiseSchedule& schedule, const Tensor& z,
                         std::span<const int> t_from, std::span<const int> t_to, std::span<const int> c, float omega,
                         int null_class);

/// (1+ω) ε̂(z, c) - ω ε̂(z, ∅); a single evaluation when ω = 0.
Tensor guided_eps(const EpsFn& eps, const Tensor& z, std::span<const int> t, std::span<const int> c, float omega,
                  int null_class);

/// Multi-step DDIM sampling from seeded N(0, I) at t = T down to t = 0.
Tensor ddim_sample(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerConfig& config,
                   std::span<const int> classes, int image_size, int null_class);

/// Multi-step consistency sampling: evaluate f at the first `steps` ladder
/// times, re-noising the estimate with fresh noise between evaluations.
Tensor lcm_sample(const ConsistencyFn& f, const NoiseSchedule& schedule, const SamplerConfig& config,
                  std::span<const int> classes, int image_size);

/// Seeded standard-normal tensor.
Tensor randn(const Shape& shape, Rng& rng);

}  // namespace lcdlab
