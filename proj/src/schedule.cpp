#include "lcdlab/schedule.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"

namespace lcdlab {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Linear ? "linear" : "scaled_linear"; }

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "scaled_linear" || name == "scaled-linear") return ScheduleKind::ScaledLinear;
  throw ConfigError("schedule: unknown kind '" + name + "' (expected linear or scaled_linear)");
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, double beta_start, double beta_end, int num_timesteps)
    : kind_(kind), beta_start_(beta_start), beta_end_(beta_end), T_(num_timesteps) {
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw ConfigError("schedule: require 0 < beta_start < beta_end < 1");
  if (num_timesteps < 2) throw ConfigError("schedule: T must be >= 2");

  beta_.assign(static_cast<std::size_t>(T_) + 1, 0.0);
  alpha_bar_.assign(static_cast<std::size_t>(T_) + 1, 1.0);
  const double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
  for (int t = 1; t <= T_; ++t) {
    const double frac = static_cast<double>(t - 1) / static_cast<double>(T_ - 1);
    double b = 0.0;
    if (kind == ScheduleKind::Linear) {
      b = beta_start + frac * (beta_end - beta_start);
    } else {
      const double s = s0 + frac * (s1 - s0);
      b = s * s;
    }
    beta_[static_cast<std::size_t>(t)] = b;
    alpha_bar_[static_cast<std::size_t>(t)] = alpha_bar_[static_cast<std::size_t>(t) - 1] * (1.0 - b);
  }
}

void NoiseSchedule::check_timestep(int t, int lowest) const {
  if (t < lowest || t > T_)
    throw ConfigError("schedule: timestep " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                      std::to_string(T_) + "]");
}

double NoiseSchedule::beta(int t) const {
  check_timestep(t, 1);
  return beta_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_timestep(t, 0);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::log_snr(int t) const {
  check_timestep(t, 1);
  const double a = alpha_bar_[static_cast<std::size_t>(t)];
  return std::log(a / (1.0 - a));
}

Tensor per_sample_coeff(const Tensor& like, const std::vector<float>& values) {
  if (static_cast<std::int64_t>(values.size()) != like.dim(0))
    throw ShapeError("per_sample_coeff: " + std::to_string(values.size()) + " values for batch of " +
                     shape_str(like.shape()));
  Shape s(like.rank(), 1);
  s[0] = like.dim(0);
  return Tensor::from_data(s, values);
}

Tensor add_noise(const NoiseSchedule& schedule, const Tensor& z0, const Tensor& eps, int t) {
  std::vector<int> ts(static_cast<std::size_t>(z0.dim(0)), t);
  return add_noise(schedule, z0, eps, ts);
}

Tensor add_noise(const NoiseSchedule& schedule, const Tensor& z0, const Tensor& eps, std::span<const int> t) {
  if (z0.shape() != eps.shape())
    throw ShapeError("add_noise: incompatible shapes " + shape_str(z0.shape()) + " and " + shape_str(eps.shape()));
  if (static_cast<std::int64_t>(t.size()) != z0.dim(0)) throw ShapeError("add_noise: one timestep per sample required");
  std::vector<float> a(t.size()), s(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    a[i] = static_cast<float>(schedule.sqrt_alpha_bar(t[i]));
    s[i] = static_cast<float>(schedule.sigma(t[i]));
  }
  return ops::add(ops::broadcast_mul(z0, per_sample_coeff(z0, a)), ops::broadcast_mul(eps, per_sample_coeff(eps, s)));
}

SkipGrid::SkipGrid(int num_timesteps, int skip) : T_(num_timesteps), k_(skip) {
  if (skip < 1 || skip >= num_timesteps)
    throw ConfigError("skip grid: require 1 <= k < T (k=" + std::to_string(skip) + ", T=" +
                      std::to_string(num_timesteps) + ")");
}

std::pair<int, int> SkipGrid::pair(int n) const {
  if (n < n_min() || n > n_max())
    throw ConfigError("skip grid: n=" + std::to_string(n) + " outside [1, " + std::to_string(n_max()) + "]");
  return {n + k_, n};
}

std::vector<std::pair<int, int>> SkipGrid::all_pairs() const {
  std::vector<std::pair<int, int>> out;
  for (int n = n_min(); n <= n_max(); ++n) out.push_back(pair(n));
  return out;
}

void write_schedule_csv(const NoiseSchedule& schedule, std::ostream& os) {
  os << "t,beta,alpha_bar,log_snr\n";
  os << std::setprecision(17);
  for (int t = 1; t <= schedule.num_timesteps(); ++t)
    os << t << ',' << schedule.beta(t) << ',' << schedule.alpha_bar(t) << ',' << schedule.log_snr(t) << '\n';
}

}  // namespace lcdlab
