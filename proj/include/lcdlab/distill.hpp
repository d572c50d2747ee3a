#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "lcdlab/control.hpp"
#include "lcdlab/model.hpp"
#include "lcdlab/optim.hpp"
#include "lcdlab/schedule.hpp"
#include "lcdlab/solver.hpp"

namespace lcdlab {

enum class DistanceKind { PseudoHuber, L2 };

std::string to_string(DistanceKind kind);
DistanceKind distance_kind_from_string(const std::string& name);

/// Latent-consistency-distillation hyper-parameters.
struct LCDConfig {
  float omega_fix = 4.5F;
  int k = 20;
  float mu = 0.95F;
  float lr = 2e-5F;
  int batch = 24;
  int max_steps = 5000;
  DistanceKind distance = DistanceKind::PseudoHuber;
  float huber_delta = 1e-3F;
  std::uint64_t seed = 0;

  void validate(int num_timesteps) const;
};

/// Mean over elements of sqrt((a-b)² + δ²) - δ (pseudo-Huber), or of (a-b)².
/// The pseudo-Huber form is evaluated as r² / (sqrt(r² + δ²) + δ), which is
/// exactly zero at r = 0.
Tensor distance(const Tensor& a, const Tensor& b, DistanceKind kind, float delta);

/// θ⁻ <- μ θ⁻ + (1-μ) θ, elementwise, written in place without a graph.
void ema_update(const std::vector<Tensor>& ema, const std::vector<Tensor>& online, float mu);

/// Sets requires_grad = false on every parameter.
void freeze(DiffusionTransformer& model);
/// Throws if any of `params` carries a gradient buffer.
void assert_no_grad(const std::vector<NamedTensor>& params, const std::string& what);

struct StepResult {
  float loss = 0.0F;
  double grad_norm = 0.0;
  int null_conditions = 0;  // samples routed to ∅ (teacher dropout)
};

/// ε-prediction pretraining step: t ~ U[1,T], ε ~ N(0,I), class dropped to ∅
/// with probability `p_drop`, MSE loss, one AdamW step.
StepResult teacher_train_step(DiffusionTransformer& model, AdamW& opt, const NoiseSchedule& schedule,
                              const Tensor& z0, std::span<const int> classes, Rng& rng, float lr, float p_drop);

/// Student/EMA pair being distilled. The EMA copy never sees an optimizer.
struct TrainState {
  DiffusionTransformer student;
  DiffusionTransformer ema;
  AdamW optimizer;
  std::int64_t step = 0;
  std::deque<float> loss_history;
  std::size_t history_capacity = 1000;

  /// Student and EMA start as exact copies of the teacher.
  static TrainState from_teacher(const DiffusionTransformer& teacher, AdamWOptions options = {});
  void record_loss(float loss);
};

/// Consistency-distillation loss for explicit timestep pairs:
///   ẑ = z + (1+ω)Ψ(z, t_hi→t_lo, c) - ωΨ(z, t_hi→t_lo, ∅)          (teacher)
///   L = d(f_θ(z, t_hi, c), stopgrad f_θ⁻(ẑ, t_lo, c))
/// Only the student records a graph.
Tensor lcd_loss(const DiffusionTransformer& student, const DiffusionTransformer& ema, const EpsFn& teacher,
                const NoiseSchedule& schedule, const ConsistencyHead& head, const Tensor& z_hi,
                std::span<const int> t_hi, std::span<const int> t_lo, std::span<const int> c, float omega,
                int null_class, DistanceKind distance_kind, float delta);

/// One full distillation iteration: draw n ~ U[1, T-k] per sample, noise the
/// batch to t_{n+k}, take the loss above, AdamW on θ, then the EMA blend.
/// The teacher must be frozen; gradients reaching teacher or EMA throw.
StepResult lcd_step(TrainState& state, const DiffusionTransformer& teacher, const NoiseSchedule& schedule,
                    const ConsistencyHead& head, const Tensor& z0, std::span<const int> classes,
                    const LCDConfig& config, Rng& rng);

/// ε-loss through the adapter over `accumulation` equal micro-batches, one
/// AdamW step on adapter parameters. Per-sample noise and timesteps are drawn
/// for the whole batch up front, so the update is independent of the split.
StepResult controlnet_train_step(ControlAdapter& adapter, AdamW& opt, const NoiseSchedule& schedule,
                                 const Tensor& z0, std::span<const int> classes, const Tensor& cond_maps, Rng& rng,
                                 float lr, int accumulation);

}  // namespace lcdlab
