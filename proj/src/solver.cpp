#include "lcdlab/solver.hpp"

#include <cmath>

#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"

namespace lcdlab {

std::string to_string(SolverKind kind) { return kind == SolverKind::DDIM ? "ddim" : "consistency"; }

SolverKind solver_kind_from_string(const std::string& name) {
  if (name == "ddim") return SolverKind::DDIM;
  if (name == "consistency" || name == "lcm") return SolverKind::Consistency;
  throw ConfigError("sampler: unknown kind '" + name + "' (expected ddim or consistency)");
}

void SamplerConfig::validate(int num_timesteps) const {
  if (!(guidance >= 0.0F)) throw ConfigError("sampler: guidance must be >= 0");
  if (kind == SolverKind::Consistency && (steps < 1 || steps > 8))
    throw ConfigError("sampler: consistency sampling supports 1..8 steps, got " + std::to_string(steps));
  if (kind == SolverKind::DDIM && (steps < 1 || steps > num_timesteps))
    throw ConfigError("sampler: ddim steps must lie in [1, T], got " + std::to_string(steps));
}

std::vector<int> sampling_ladder(int num_timesteps, int steps) {
  if (steps < 1 || steps > num_timesteps) throw ConfigError("sampler: ladder needs 1 <= steps <= T");
  std::vector<int> ladder(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i)
    ladder[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(num_timesteps) * (steps - i) / steps));
  return ladder;
}

Tensor randn(const Shape& shape, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor::from_data(shape, std::move(v));
}

Tensor ddim_step_from_eps(const NoiseSchedule& schedule, const Tensor& z, std::span<const int> t_from,
                          std::span<const int> t_to, const Tensor& eps_hat) {
  if (z.shape() != eps_hat.shape())
    throw ShapeError("ddim_step: incompatible shapes " + shape_str(z.shape()) + " and " + shape_str(eps_hat.shape()));
  const auto b = static_cast<std::size_t>(z.dim(0));
  if (t_from.size() != b || t_to.size() != b) throw ShapeError("ddim_step: one timestep pair per sample required");
  const auto per = static_cast<std::size_t>(z.numel()) / b;
  auto zd = z.data();
  auto ed = eps_hat.data();
  std::vector<float> out(zd.begin(), zd.end());
  for (std::size_t i = 0; i < b; ++i) {
    schedule.check_timestep(t_from[i], 0);
    schedule.check_timestep(t_to[i], 0);
    if (t_to[i] > t_from[i])
      throw ConfigError("ddim_step: t_to=" + std::to_string(t_to[i]) + " exceeds t_from=" + std::to_string(t_from[i]));
    if (t_to[i] == t_from[i]) continue;
    const double a_f = schedule.sqrt_alpha_bar(t_from[i]), s_f = schedule.sigma(t_from[i]);
    const double a_t = schedule.sqrt_alpha_bar(t_to[i]), s_t = schedule.sigma(t_to[i]);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      const double x0 = (zd[j] - s_f * ed[j]) / a_f;
      out[j] = static_cast<float>(a_t * x0 + s_t * ed[j]);
    }
  }
  for (float v : out)
    if (!std::isfinite(v)) throw NumericError("ddim_step: non-finite output");
  return Tensor::from_data(z.shape(), std::move(out));
}

Tensor ddim_step(const EpsFn& eps, const NoiseSchedule& schedule, const Tensor& z, std::span<const int> t_from,
                 std::span<const int> t_to, std::span<const int> c) {
  bool identity = true;
  for (std::size_t i = 0; i < t_from.size() && i < t_to.size(); ++i) identity = identity && t_from[i] == t_to[i];
  if (identity && t_from.size() == static_cast<std::size_t>(z.dim(0)) && t_to.size() == t_from.size()) {
    for (std::size_t i = 0; i < t_from.size(); ++i) schedule.check_timestep(t_from[i], 0);
    return z.detach();
  }
  NoGradGuard guard;
  return ddim_step_from_eps(schedule, z, t_from, t_to, eps(z, t_from, c));
}

Tensor psi(const EpsFn& eps, const NoiseSchedule& schedule, const Tensor& z, std::span<const int> t_from,
           std::span<const int> t_to, std::span<const int> c) {
  NoGradGuard guard;
  return ops::sub(ddim_step(eps, schedule, z, t_from, t_to, c), z.detach());
}

Tensor cfg_solved_target(const EpsFn& teacher, const NoiseSchedule& schedule, const Tensor& z,
                         std::span<const int> t_from, std::span<const int> t_to, std::span<const int> c, float omega,
                         int null_class) {
  if (!(omega >= 0.0F)) throw ConfigError("cfg: guidance scale must be >= 0");
  NoGradGuard guard;
  const auto zd = z.detach();
  auto target = ops::add(zd, ops::scale(psi(teacher, schedule, zd, t_from, t_to, c), 1.0F + omega));
  if (omega == 0.0F) return target;
  std::vector<int> uncond(c.size(), null_class);
  return ops::sub(target, ops::scale(psi(teacher, schedule, zd, t_from, t_to, uncond), omega));
}

Tensor guided_eps(const EpsFn& eps, const Tensor& z, std::span<const int> t, std::span<const int> c, float omega,
                  int null_class) {
  auto cond = eps(z, t, c);
  if (omega == 0.0F) return cond;
  std::vector<int> uncond(c.size(), null_class);
  auto un = eps(z, t, uncond);
  return ops::sub(ops::scale(cond, 1.0F + omega), ops::scale(un, omega));
}

Tensor ddim_sample(const EpsFn& eps, const NoiseSchedule& schedule, const SamplerConfig& config,
                   std::span<const int> classes, int image_size, int null_class) {
  config.validate(schedule.num_timesteps());
  NoGradGuard guard;
  Rng rng = Rng(config.seed).split("sample");
  const auto b = static_cast<std::int64_t>(classes.size());
  auto z = randn({b, image_size, image_size}, rng);
  const auto ladder = sampling_ladder(schedule.num_timesteps(), config.steps);
  for (std::size_t i = 0; i + 1 < ladder.size(); ++i) {
    std::vector<int> tf(classes.size(), ladder[i]), tt(classes.size(), ladder[i + 1]);
    const auto e = guided_eps(eps, z, tf, classes, config.guidance, null_class);
    z = ddim_step_from_eps(schedule, z, tf, tt, e);
  }
  return z;
}

Tensor lcm_sample(const ConsistencyFn& f, const NoiseSchedule& schedule, const SamplerConfig& config,
                  std::span<const int> classes, int image_size) {
  SamplerConfig checked = config;
  checked.kind = SolverKind::Consistency;
  checked.validate(schedule.num_timesteps());
  NoGradGuard guard;
  Rng rng = Rng(config.seed).split("sample");
  const auto b = static_cast<std::int64_t>(classes.size());
  const Shape shape{b, image_size, image_size};
  const auto ladder = sampling_ladder(schedule.num_timesteps(), config.steps);
  auto z = randn(shape, rng);
  std::vector<int> t(classes.size(), ladder[0]);
  auto x = f(z, t, classes);
  for (int i = 1; i < config.steps; ++i) {
    const int ti = ladder[static_cast<std::size_t>(i)];
    std::fill(t.begin(), t.end(), ti);
    z = add_noise(schedule, x, randn(shape, rng), ti);
    x = f(z, t, classes);
  }
  return x.detach();
}

}  // namespace lcdlab
