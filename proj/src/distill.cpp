#include "lcdlab/distill.hpp"

#include <cmath>

#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"

namespace lcdlab {

std::string to_string(DistanceKind kind) { return kind == DistanceKind::PseudoHuber ? "pseudo_huber" : "l2"; }

DistanceKind distance_kind_from_string(const std::string& name) {
  if (name == "pseudo_huber" || name == "huber") return DistanceKind::PseudoHuber;
  if (name == "l2") return DistanceKind::L2;
  throw ConfigError("distance: unknown kind '" + name + "' (expected pseudo_huber or l2)");
}

void LCDConfig::validate(int num_timesteps) const {
  if (!(mu >= 0.0F && mu < 1.0F)) throw ConfigError("lcd: mu must lie in [0, 1)");
  if (k < 1 || k >= num_timesteps) throw ConfigError("lcd: k must lie in [1, T)");
  if (!(lr > 0.0F)) throw ConfigError("lcd: lr must be positive");
  if (!(omega_fix >= 0.0F)) throw ConfigError("lcd: omega_fix must be >= 0");
  if (batch < 1) throw ConfigError("lcd: batch must be >= 1");
  if (!(huber_delta > 0.0F)) throw ConfigError("lcd: huber_delta must be positive");
}

Tensor distance(const Tensor& a, const Tensor& b, DistanceKind kind, float delta) {
  const auto r2 = ops::square(ops::sub(a, b));
  if (kind == DistanceKind::L2) return ops::mean(r2);
  const auto denom = ops::add_scalar(ops::sqrt(ops::add_scalar(r2, delta * delta)), delta);
  return ops::mean(ops::div(r2, denom));
}

void ema_update(const std::vector<Tensor>& ema, const std::vector<Tensor>& online, float mu) {
  if (ema.size() != online.size()) throw ShapeError("ema_update: parameter count mismatch");
  if (!(mu >= 0.0F && mu < 1.0F)) throw ConfigError("ema_update: mu must lie in [0, 1)");
  for (std::size_t i = 0; i < ema.size(); ++i)
    if (ema[i].shape() != online[i].shape())
      throw ShapeError("ema_update: incompatible shapes " + shape_str(ema[i].shape()) + " and " +
                       shape_str(online[i].shape()));
  for (std::size_t i = 0; i < ema.size(); ++i) {
    Tensor e = ema[i];
    auto dst = e.mutable_data();
    auto src = online[i].data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = mu * dst[j] + (1.0F - mu) * src[j];
  }
}

void freeze(DiffusionTransformer& model) {
  model.set_requires_grad(false);
  for (auto np : model.named_parameters()) np.tensor.clear_grad();
}

void assert_no_grad(const std::vector<NamedTensor>& params, const std::string& what) {
  for (const auto& np : params)
    if (np.tensor.has_grad() || np.tensor.requires_grad())
      throw Error(what + ": parameter '" + np.name + "' received or can receive a gradient");
}

namespace {

void check_finite_loss(float loss, const char* where) {
  if (!std::isfinite(loss)) throw NumericError(std::string(where) + ": non-finite loss");
}

}  // namespace

StepResult teacher_train_step(DiffusionTransformer& model, AdamW& opt, const NoiseSchedule& schedule,
                              const Tensor& z0, std::span<const int> classes, Rng& rng, float lr, float p_drop) {
  const auto b = static_cast<std::size_t>(z0.dim(0));
  if (b == 0 || classes.size() != b) throw ShapeError("teacher step: need a nonempty batch with one class per sample");
  StepResult result;
  std::vector<int> t(b), c(classes.begin(), classes.end());
  for (std::size_t i = 0; i < b; ++i) {
    t[i] = rng.uniform_int(1, schedule.num_timesteps());
    if (rng.uniform() < p_drop) {
      c[i] = model.null_class();
      ++result.null_conditions;
    }
  }
  Rng noise_rng = rng.split("noise");
  const auto eps = randn(z0.shape(), noise_rng);
  const auto z_t = add_noise(schedule, z0, eps, t);

  opt.zero_grad();
  const auto loss = ops::mean(ops::square(ops::sub(model.forward_eps(z_t, t, c), eps)));
  result.loss = loss.item();
  check_finite_loss(result.loss, "teacher step");
  loss.backward();
  result.grad_norm = grad_norm(opt.params());
  opt.step(lr);
  return result;
}

TrainState TrainState::from_teacher(const DiffusionTransformer& teacher, AdamWOptions options) {
  auto student = init_student_from_teacher(teacher);
  student.set_requires_grad(true);
  auto ema = init_student_from_teacher(teacher);
  freeze(ema);
  auto params = student.parameters();
  return TrainState{std::move(student), std::move(ema), AdamW(std::move(params), options), 0, {}, 1000};
}

void TrainState::record_loss(float loss) {
  loss_history.push_back(loss);
  while (loss_history.size() > history_capacity) loss_history.pop_front();
}

Tensor lcd_loss(const DiffusionTransformer& student, const DiffusionTransformer& ema, const EpsFn& teacher,
                const NoiseSchedule& schedule, const ConsistencyHead& head, const Tensor& z_hi,
                std::span<const int> t_hi, std::span<const int> t_lo, std::span<const int> c, float omega,
                int null_class, DistanceKind distance_kind, float delta) {
  Tensor target;
  {
    NoGradGuard guard;
    const auto z_lo = cfg_solved_target(teacher, schedule, z_hi, t_hi, t_lo, c, omega, null_class);
    target = consistency_forward(eps_fn(ema), head, schedule, z_lo, t_lo, c).detach();
  }
  const auto pred = consistency_forward(eps_fn(student), head, schedule, z_hi, t_hi, c);
  return distance(pred, target, distance_kind, delta);
}

StepResult lcd_step(TrainState& state, const DiffusionTransformer& teacher, const NoiseSchedule& schedule,
                    const ConsistencyHead& head, const Tensor& z0, std::span<const int> classes,
                    const LCDConfig& config, Rng& rng) {
  config.validate(schedule.num_timesteps());
  const auto teacher_params = teacher.named_parameters();
  for (const auto& np : teacher_params)
    if (np.tensor.requires_grad()) throw Error("lcd step: teacher must be frozen before distillation");
  const auto b = static_cast<std::size_t>(z0.dim(0));
  if (b == 0 || classes.size() != b) throw ShapeError("lcd step: need a nonempty batch with one class per sample");

  const SkipGrid grid(schedule.num_timesteps(), config.k);
  std::vector<int> t_hi(b), t_lo(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto [hi, lo] = grid.pair(grid.sample_n(rng));
    t_hi[i] = hi;
    t_lo[i] = lo;
  }
  Rng noise_rng = rng.split("noise");
  const auto z_hi = add_noise(schedule, z0, randn(z0.shape(), noise_rng), t_hi);

  state.optimizer.zero_grad();
  const auto loss = lcd_loss(state.student, state.ema, eps_fn(teacher), schedule, head, z_hi, t_hi, t_lo, classes,
                             config.omega_fix, teacher.null_class(), config.distance, config.huber_delta);
  StepResult result;
  result.loss = loss.item();
  check_finite_loss(result.loss, "lcd step");
  loss.backward();
  assert_no_grad(teacher_params, "lcd step (teacher)");
  assert_no_grad(state.ema.named_parameters(), "lcd step (ema)");
  result.grad_norm = grad_norm(state.optimizer.params());
  state.optimizer.step(config.lr);
  ema_update(state.ema.parameters(), state.student.parameters(), config.mu);
  ++state.step;
  state.record_loss(result.loss);
  return result;
}

StepResult controlnet_train_step(ControlAdapter& adapter, AdamW& opt, const NoiseSchedule& schedule,
                                 const Tensor& z0, std::span<const int> classes, const Tensor& cond_maps, Rng& rng,
                                 float lr, int accumulation) {
  const auto b = z0.dim(0);
  if (accumulation < 1 || b % accumulation != 0)
    throw ConfigError("control step: batch of " + std::to_string(b) + " not divisible into " +
                      std::to_string(accumulation) + " micro-batches");
  if (static_cast<std::int64_t>(classes.size()) != b || cond_maps.shape() != z0.shape())
    throw ShapeError("control step: classes/condition maps do not match the batch");
  const auto base_params = adapter.base().named_parameters();
  for (const auto& np : base_params)
    if (np.tensor.requires_grad()) throw Error("control step: base model must be frozen");

  std::vector<int> t(static_cast<std::size_t>(b));
  for (auto& ti : t) ti = rng.uniform_int(1, schedule.num_timesteps());
  Rng noise_rng = rng.split("noise");
  const auto eps = randn(z0.shape(), noise_rng);
  const auto z_t = add_noise(schedule, z0, eps, t);

  opt.zero_grad();
  const auto micro = b / accumulation;
  double total = 0.0;
  for (int m = 0; m < accumulation; ++m) {
    const auto start = m * micro;
    const auto zt_m = ops::narrow(z_t, 0, start, micro);
    const auto eps_m = ops::narrow(eps, 0, start, micro);
    const auto cond_m = ops::narrow(cond_maps, 0, start, micro);
    const std::span<const int> t_m(t.data() + start, static_cast<std::size_t>(micro));
    const auto c_m = classes.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(micro));
    auto loss = ops::mean(ops::square(ops::sub(adapter.forward(zt_m, t_m, c_m, cond_m), eps_m)));
    total += loss.item();
    ops::scale(loss, 1.0F / static_cast<float>(accumulation)).backward();
  }
  assert_no_grad(base_params, "control step (base)");
  StepResult result;
  result.loss = static_cast<float>(total / accumulation);
  check_finite_loss(result.loss, "control step");
  result.grad_norm = grad_norm(opt.params());
  opt.step(lr);
  return result;
}

}  // namespace lcdlab
