#include <gtest/gtest.h>

#include <cmath>

#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"
#include "lcdlab/solver.hpp"

namespace lcdlab {
namespace {

const NoiseSchedule& schedule() {
  static const NoiseSchedule s(ScheduleKind::Linear, 1e-4, 0.02, 1000);
  return s;
}

// Data z0 ~ N(0, I): the exact noise prediction is E[ε | z_t] = sqrt(1 - ᾱ_t) z_t.
EpsFn gaussian_eps() {
  return [](const Tensor& z, std::span<const int> t, std::span<const int>) {
    std::vector<float> coeff;
    for (int ti : t) coeff.push_back(static_cast<float>(schedule().sigma(ti)));
    return ops::broadcast_mul(z, per_sample_coeff(z, coeff));
  };
}

double lambda(int from, int to) {
  const auto& s = schedule();
  return std::sqrt(s.alpha_bar(to) * s.alpha_bar(from)) + std::sqrt((1 - s.alpha_bar(to)) * (1 - s.alpha_bar(from)));
}

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return randn(shape, rng);
}

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.width = 16;
  c.depth = 2;
  c.heads = 2;
  c.num_classes = 3;
  return c;
}

TEST(Ladder, EndpointsAndSpacing) {
  EXPECT_EQ(sampling_ladder(1000, 4), (std::vector<int>{1000, 750, 500, 250, 0}));
  EXPECT_EQ(sampling_ladder(1000, 1), (std::vector<int>{1000, 0}));
  EXPECT_EQ(sampling_ladder(1000, 3).back(), 0);
  EXPECT_THROW(sampling_ladder(1000, 0), ConfigError);
}

TEST(SamplerConfig, Bounds) {
  SamplerConfig c;
  c.kind = SolverKind::Consistency;
  c.steps = 8;
  EXPECT_NO_THROW(c.validate(1000));
  c.steps = 9;
  EXPECT_THROW(c.validate(1000), ConfigError);
  c.kind = SolverKind::DDIM;
  c.steps = 1000;
  EXPECT_NO_THROW(c.validate(1000));
  c.steps = 1001;
  EXPECT_THROW(c.validate(1000), ConfigError);
  c.steps = 10;
  c.guidance = -1.0F;
  EXPECT_THROW(c.validate(1000), ConfigError);
}

TEST(DdimGaussian, StepIsScalarMapLambda) {
  const auto z = noise({4, 3, 3}, 1);
  const std::vector<std::pair<int, int>> pairs{{1000, 750}, {500, 480}, {21, 1}, {300, 0}};
  for (auto [from, to] : pairs) {
    const std::vector<int> tf(4, from), tt(4, to), c(4, 0);
    const auto out = ddim_step(gaussian_eps(), schedule(), z, tf, tt, c);
    const double lam = lambda(from, to);
    for (std::int64_t i = 0; i < z.numel(); ++i)
      EXPECT_NEAR(out.at(i), lam * z.at(i), 1e-5 * (1.0 + std::abs(z.at(i)))) << from << "->" << to;
    const auto inc = psi(gaussian_eps(), schedule(), z, tf, tt, c);
    for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(inc.at(i), (lam - 1.0) * z.at(i), 1e-5);
  }
}

double max_step_error(int steps) {
  const auto ladder = sampling_ladder(1000, steps);
  double worst = 0.0;
  for (std::size_t i = 0; i + 1 < ladder.size(); ++i) worst = std::max(worst, std::abs(lambda(ladder[i], ladder[i + 1]) - 1));
  return worst;
}

double trajectory_error(int steps) {
  const auto ladder = sampling_ladder(1000, steps);
  double prod = 1.0;
  for (std::size_t i = 0; i + 1 < ladder.size(); ++i) prod *= lambda(ladder[i], ladder[i + 1]);
  return std::abs(prod - 1.0);  // the exact flow is the identity
}

TEST(DdimGaussian, PerStepErrorShrinksFourfold) {
  for (int s : {5, 10, 20}) {
    const double ratio = max_step_error(2 * s) / max_step_error(s);
    EXPECT_GE(ratio, 0.2) << s;
    EXPECT_LE(ratio, 0.35) << s;
  }
}

TEST(DdimGaussian, WholeTrajectoryErrorIsFirstOrder) {
  // Summing S local errors of size O(1/S²) leaves O(1/S) globally.
  for (int s : {5, 10, 20}) {
    const double ratio = trajectory_error(2 * s) / trajectory_error(s);
    EXPECT_GT(ratio, 0.45) << s;
    EXPECT_LT(ratio, 0.6) << s;
  }
}

TEST(DdimGaussian, SampledTrajectoryMatchesProduct) {
  SamplerConfig cfg;
  cfg.kind = SolverKind::DDIM;
  cfg.steps = 10;
  cfg.seed = 3;
  const std::vector<int> c(16, 0);
  const auto out = ddim_sample(gaussian_eps(), schedule(), cfg, c, 1, 3);
  Rng rng = Rng(3).split("sample");
  const auto z = randn({16, 1, 1}, rng);
  const double prod = 1.0 - trajectory_error(10);
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(out.at(i), prod * z.at(i), 1e-5 * (1 + std::abs(z.at(i))));
}

TEST(DdimGaussian, FiftyStepMarginalStd) {
  SamplerConfig cfg;
  cfg.kind = SolverKind::DDIM;
  cfg.steps = 50;
  cfg.seed = 8;
  const std::vector<int> c(10000, 0);
  const auto out = ddim_sample(gaussian_eps(), schedule(), cfg, c, 1, 3);
  double s2 = 0.0;
  for (float v : out.data()) s2 += static_cast<double>(v) * v;
  const double sd = std::sqrt(s2 / 10000);
  EXPECT_GE(sd, 0.9);
  EXPECT_LE(sd, 1.1);
}

struct CountingEps {
  EpsFn inner;
  int null_class;
  int* calls;
  int* null_rows;
  Tensor operator()(const Tensor& z, std::span<const int> t, std::span<const int> c) const {
    ++*calls;
    for (int ci : c) *null_rows += ci == null_class;
    return inner(z, t, c);
  }
};

TEST(Cfg, TwoPsiTargetEqualsMergedEpsStep) {
  DiffusionTransformer m(tiny(), 4);
  Rng rng(5);
  randomize_parameters(m.named_parameters(), rng, 0.3F);
  m.set_requires_grad(false);
  const auto eps = eps_fn(m);
  for (int draw = 0; draw < 50; ++draw) {
    Rng d = Rng(100).fork(draw);
    const auto z = randn({2, 8, 8}, d);
    const int from = d.uniform_int(21, 1000);
    const std::vector<int> tf{from, from}, tt{from - 20, from - 20};
    const std::vector<int> c{d.uniform_int(0, 2), d.uniform_int(0, 2)};
    const float omega = static_cast<float>(d.uniform_double() * 8.0);
    const auto target = cfg_solved_target(eps, schedule(), z, tf, tt, c, omega, m.null_class());
    const auto merged = ddim_step_from_eps(schedule(), z, tf, tt, guided_eps(eps, z, tf, c, omega, m.null_class()));
    for (std::int64_t i = 0; i < z.numel(); ++i) ASSERT_NEAR(target.at(i), merged.at(i), 1e-5) << draw;
  }
}

TEST(Cfg, OmegaZeroIsConditionalStepAndSkipsNull) {
  DiffusionTransformer m(tiny(), 4);
  Rng rng(5);
  randomize_parameters(m.named_parameters(), rng, 0.3F);
  m.set_requires_grad(false);
  int calls = 0, null_rows = 0;
  const EpsFn counted = CountingEps{eps_fn(m), m.null_class(), &calls, &null_rows};
  const auto z = noise({3, 8, 8}, 2);
  const std::vector<int> tf(3, 400), tt(3, 380), c{0, 1, 2};
  const auto target = cfg_solved_target(counted, schedule(), z, tf, tt, c, 0.0F, m.null_class());
  EXPECT_EQ(null_rows, 0);
  const auto step = ddim_step(eps_fn(m), schedule(), z, tf, tt, c);
  for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(target.at(i), step.at(i), 1e-6);
  calls = null_rows = 0;
  guided_eps(counted, z, tf, c, 0.0F, m.null_class());
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(null_rows, 0);
  null_rows = 0;
  cfg_solved_target(counted, schedule(), z, tf, tt, c, 4.5F, m.null_class());
  EXPECT_EQ(null_rows, 3);
}

TEST(Cfg, TeacherReceivesNoGradient) {
  DiffusionTransformer m(tiny(), 4);  // deliberately not frozen
  Rng rng(5);
  randomize_parameters(m.named_parameters(), rng, 0.3F);
  const auto z = noise({2, 8, 8}, 2);
  const std::vector<int> tf(2, 400), tt(2, 380), c{0, 1};
  const auto target = cfg_solved_target(eps_fn(m), schedule(), z, tf, tt, c, 4.5F, m.null_class());
  EXPECT_TRUE(target.is_leaf());
  EXPECT_FALSE(target.requires_grad());
  for (const auto& p : m.named_parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(Lcm, ConstantFunctionIsFixedPoint) {
  const std::vector<float> m_values{0.25F, -0.5F, 0.75F, 1.0F};
  const auto m = Tensor::from_data({1, 2, 2}, m_values);
  const ConsistencyFn f = [&](const Tensor& z, std::span<const int>, std::span<const int>) {
    std::vector<float> out;
    for (std::int64_t b = 0; b < z.dim(0); ++b) out.insert(out.end(), m_values.begin(), m_values.end());
    return Tensor::from_data(z.shape(), out);
  };
  for (int steps = 1; steps <= 8; ++steps) {
    SamplerConfig cfg;
    cfg.steps = steps;
    cfg.seed = static_cast<std::uint64_t>(steps);
    const std::vector<int> c{0, 1, 2};
    const auto out = lcm_sample(f, schedule(), cfg, c, 2);
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 4; ++i) EXPECT_EQ(out.at(b * 4 + i), m_values[static_cast<std::size_t>(i)]);
  }
}

TEST(Lcm, EvaluatesLadderTimesInOrder) {
  std::vector<int> seen;
  const ConsistencyFn f = [&](const Tensor& z, std::span<const int> t, std::span<const int>) {
    seen.push_back(t[0]);
    return z;
  };
  SamplerConfig cfg;
  cfg.steps = 4;
  const std::vector<int> c{0};
  lcm_sample(f, schedule(), cfg, c, 2);
  EXPECT_EQ(seen, (std::vector<int>{1000, 750, 500, 250}));
}

TEST(Samplers, BitwiseDeterministic) {
  DiffusionTransformer m(tiny(), 4);
  Rng rng(5);
  randomize_parameters(m.named_parameters(), rng, 0.3F);
  const auto head = ConsistencyHead::for_schedule(schedule());
  const auto eps = eps_fn(m);
  const ConsistencyFn f = [&](const Tensor& z, std::span<const int> t, std::span<const int> c) {
    return consistency_forward(eps, head, schedule(), z, t, c);
  };
  const std::vector<int> c{0, 1};
  SamplerConfig d;
  d.kind = SolverKind::DDIM;
  d.steps = 6;
  d.guidance = 2.0F;
  d.seed = 9;
  EXPECT_EQ(ddim_sample(eps, schedule(), d, c, 8, 3).to_vector(), ddim_sample(eps, schedule(), d, c, 8, 3).to_vector());
  SamplerConfig l;
  l.steps = 4;
  l.seed = 9;
  EXPECT_EQ(lcm_sample(f, schedule(), l, c, 8).to_vector(), lcm_sample(f, schedule(), l, c, 8).to_vector());
  l.seed = 10;
  SamplerConfig l9 = l;
  l9.seed = 9;
  EXPECT_NE(lcm_sample(f, schedule(), l, c, 8).to_vector(), lcm_sample(f, schedule(), l9, c, 8).to_vector());
}

TEST(DdimStep, RejectsBackwardTime) {
  const auto z = noise({1, 2, 2}, 1);
  const std::vector<int> tf{10}, tt{20}, c{0};
  EXPECT_THROW(ddim_step(gaussian_eps(), schedule(), z, tf, tt, c), ConfigError);
}

}  // namespace
}  // namespace lcdlab
