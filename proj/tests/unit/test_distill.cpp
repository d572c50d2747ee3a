#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lcdlab/distill.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/ops.hpp"

namespace lcdlab {
namespace {

const NoiseSchedule& schedule() {
  static const NoiseSchedule s(ScheduleKind::Linear, 1e-4, 0.02, 1000);
  return s;
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

DiffusionTransformer random_teacher(std::uint64_t seed) {
  DiffusionTransformer m(tiny(), seed);
  Rng rng(seed + 1);
  randomize_parameters(m.named_parameters(), rng, 0.2F);
  freeze(m);
  return m;
}

TEST(Ema, SingleUpdateIsExactBlend) {
  const auto e = Tensor::from_data({3}, std::vector<float>{1.0F, -2.0F, 0.5F});
  const auto o = Tensor::from_data({3}, std::vector<float>{3.0F, 4.0F, -1.0F});
  const std::vector<float> before = e.to_vector();
  ema_update({e}, {o}, 0.95F);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(e.at(i), 0.95F * before[i] + (1.0F - 0.95F) * o.at(i));
}

TEST(Ema, RepeatedUpdatesFollowGeometricLaw) {
  const auto e = Tensor::from_data({2}, std::vector<float>{0.0F, 10.0F});
  const auto o = Tensor::from_data({2}, std::vector<float>{1.0F, -1.0F});
  for (int i = 0; i < 10; ++i) ema_update({e}, {o}, 0.95F);
  const double m10 = std::pow(0.95, 10);
  EXPECT_NEAR(e.at(0), (1 - m10) * 1.0, 1e-5);
  EXPECT_NEAR(e.at(1), m10 * 10.0 + (1 - m10) * -1.0, 1e-5);
}

TEST(Ema, RejectsMismatch) {
  const auto a = Tensor::zeros({2});
  const auto b = Tensor::zeros({3});
  EXPECT_THROW(ema_update({a}, {b}, 0.9F), ShapeError);
  EXPECT_THROW(ema_update({a}, {a, a}, 0.9F), ShapeError);
  EXPECT_THROW(ema_update({a}, {a}, 1.0F), ConfigError);
}

TEST(Distance, PseudoHuberMatchesDirectFormula) {
  Rng rng(4);
  const auto a = randn({50}, rng);
  const auto b = randn({50}, rng);
  for (float delta : {1e-3F, 0.1F, 1.0F}) {
    double expect = 0.0;
    for (int i = 0; i < 50; ++i) {
      const double r = static_cast<double>(a.at(i)) - b.at(i);
      expect += std::sqrt(r * r + static_cast<double>(delta) * delta) - delta;
    }
    EXPECT_NEAR(distance(a, b, DistanceKind::PseudoHuber, delta).item(), expect / 50, 1e-5);
  }
  EXPECT_EQ(distance(a, a, DistanceKind::PseudoHuber, 1e-3F).item(), 0.0F);
}

TEST(Distance, SmallResidualIsHalfSquareOverDelta) {
  const auto a = Tensor::from_data({2}, std::vector<float>{0.0F, 0.0F});
  const auto b = Tensor::from_data({2}, std::vector<float>{1e-4F, -2e-4F});
  const double delta = 0.1;
  const double approx = (1e-8 + 4e-8) / (2 * delta) / 2;
  EXPECT_NEAR(distance(a, b, DistanceKind::PseudoHuber, 0.1F).item(), approx, approx * 1e-3);
}

TEST(Distance, L2IsMeanSquare) {
  const auto a = Tensor::from_data({2}, std::vector<float>{1.0F, 2.0F});
  const auto b = Tensor::from_data({2}, std::vector<float>{0.0F, -1.0F});
  EXPECT_FLOAT_EQ(distance(a, b, DistanceKind::L2, 1e-3F).item(), 5.0F);
  EXPECT_EQ(distance_kind_from_string("l2"), DistanceKind::L2);
  EXPECT_THROW(distance_kind_from_string("l1"), ConfigError);
}

TEST(TeacherStep, FreshModelLossNearUnitNoise) {
  DiffusionTransformer m(tiny(), 3);
  AdamW opt(m.parameters());
  Rng data(1);
  const auto z0 = randn({16, 8, 8}, data);
  const std::vector<int> c(16, 1);
  Rng rng(2);
  const auto r = teacher_train_step(m, opt, schedule(), z0, c, rng, 1e-3F, 0.1F);
  EXPECT_GE(r.loss, 0.5F);
  EXPECT_LE(r.loss, 3.0F);
  EXPECT_GT(r.grad_norm, 0.0);
}

TEST(TeacherStep, DropoutRate) {
  DiffusionTransformer m(tiny(), 3);
  AdamW opt(m.parameters());
  Rng data(1);
  const auto z0 = randn({64, 8, 8}, data);
  const std::vector<int> c(64, 0);
  int dropped = 0;
  for (int i = 0; i < 5; ++i) {
    Rng rng = Rng(9).fork(i);
    EXPECT_EQ(teacher_train_step(m, opt, schedule(), z0, c, rng, 1e-4F, 0.0F).null_conditions, 0);
    Rng rng2 = Rng(10).fork(i);
    dropped += teacher_train_step(m, opt, schedule(), z0, c, rng2, 1e-4F, 0.1F).null_conditions;
  }
  // 320 Bernoulli(0.1) draws: mean 32, sd ~5.4
  EXPECT_GT(dropped, 10);
  EXPECT_LT(dropped, 60);
}

TEST(TrainState, StartsAsTeacherCopies) {
  const auto teacher = random_teacher(5);
  const auto state = TrainState::from_teacher(teacher);
  const auto sum = parameter_checksum(teacher.named_parameters());
  EXPECT_EQ(parameter_checksum(state.student.named_parameters()), sum);
  EXPECT_EQ(parameter_checksum(state.ema.named_parameters()), sum);
  for (const auto& p : state.ema.parameters()) EXPECT_FALSE(p.requires_grad());
  for (const auto& p : state.student.parameters()) EXPECT_TRUE(p.requires_grad());
}

struct LossInputs {
  Tensor z;
  std::vector<int> t_hi, t_lo, c;
};

LossInputs make_inputs(int b, std::uint64_t seed) {
  Rng rng(seed);
  LossInputs in{randn({b, 8, 8}, rng), {}, {}, {}};
  const SkipGrid grid(1000, 20);
  for (int i = 0; i < b; ++i) {
    const auto [hi, lo] = grid.pair(grid.sample_n(rng));
    in.t_hi.push_back(hi);
    in.t_lo.push_back(lo);
    in.c.push_back(rng.uniform_int(0, 2));
  }
  return in;
}

TEST(LcdLoss, InvariantUnderBatchPermutation) {
  const auto teacher = random_teacher(5);
  auto state = TrainState::from_teacher(teacher);
  Rng rng(8);
  randomize_parameters(state.student.named_parameters(), rng, 0.2F);
  const auto head = ConsistencyHead::for_schedule(schedule());
  const auto in = make_inputs(6, 3);
  std::vector<int> perm{4, 0, 5, 2, 1, 3};
  std::vector<float> zp;
  LossInputs p{Tensor(), {}, {}, {}};
  for (int i : perm) {
    for (int j = 0; j < 64; ++j) zp.push_back(in.z.at(i * 64 + j));
    p.t_hi.push_back(in.t_hi[static_cast<std::size_t>(i)]);
    p.t_lo.push_back(in.t_lo[static_cast<std::size_t>(i)]);
    p.c.push_back(in.c[static_cast<std::size_t>(i)]);
  }
  p.z = Tensor::from_data({6, 8, 8}, zp);
  const auto loss = [&](const LossInputs& x) {
    return lcd_loss(state.student, state.ema, eps_fn(teacher), schedule(), head, x.z, x.t_hi, x.t_lo, x.c, 4.5F,
                    teacher.null_class(), DistanceKind::PseudoHuber, 1e-3F)
        .item();
  };
  const float a = loss(in), b = loss(p);
  EXPECT_NEAR(a, b, 1e-6 * std::abs(a) + 1e-9);
}

TEST(LcdLoss, TwoTeacherEvaluationsPerSample) {
  const auto teacher = random_teacher(5);
  auto state = TrainState::from_teacher(teacher);
  const auto head = ConsistencyHead::for_schedule(schedule());
  const auto in = make_inputs(5, 4);
  std::vector<int> rows_per_class(4, 0);
  const EpsFn counted = [&](const Tensor& z, std::span<const int> t, std::span<const int> c) {
    for (int ci : c) ++rows_per_class[static_cast<std::size_t>(ci)];
    return eps_fn(teacher)(z, t, c);
  };
  lcd_loss(state.student, state.ema, counted, schedule(), head, in.z, in.t_hi, in.t_lo, in.c, 4.5F,
           teacher.null_class(), DistanceKind::PseudoHuber, 1e-3F);
  EXPECT_EQ(std::accumulate(rows_per_class.begin(), rows_per_class.end(), 0), 10);
  EXPECT_EQ(rows_per_class[3], 5);  // every sample once under ∅
}

TEST(LcdLoss, ZeroWhenStudentIsConsistentAtBoundary) {
  // t_lo = 0 makes the target the solver output itself; with θ = θ⁻ and t_hi
  // also 0 the two sides coincide.
  const auto teacher = random_teacher(5);
  auto state = TrainState::from_teacher(teacher);
  const auto head = ConsistencyHead::for_schedule(schedule());
  Rng rng(2);
  const auto z = randn({2, 8, 8}, rng);
  const std::vector<int> t0{0, 0}, c{0, 1};
  const auto l = lcd_loss(state.student, state.ema, eps_fn(teacher), schedule(), head, z, t0, t0, c, 4.5F,
                          teacher.null_class(), DistanceKind::PseudoHuber, 1e-3F);
  EXPECT_EQ(l.item(), 0.0F);
}

TEST(LcdStep, TeacherFrozenEmaFollowsStudent) {
  const auto teacher = random_teacher(5);
  auto state = TrainState::from_teacher(teacher);
  const auto head = ConsistencyHead::for_schedule(schedule());
  const auto teacher_sum = parameter_checksum(teacher.named_parameters());
  LCDConfig cfg;
  cfg.lr = 1e-3F;
  Rng data(1);
  const auto z0 = randn({4, 8, 8}, data);
  const std::vector<int> c{0, 1, 2, 0};
  for (int i = 0; i < 3; ++i) {
    const auto before = state.ema.parameters()[0].to_vector();
    Rng rng = Rng(7).fork(i);
    const auto r = lcd_step(state, teacher, schedule(), head, z0, c, cfg, rng);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_EQ(parameter_checksum(teacher.named_parameters()), teacher_sum);
    for (const auto& np : teacher.named_parameters()) EXPECT_FALSE(np.tensor.has_grad());
    for (const auto& np : state.ema.named_parameters()) EXPECT_FALSE(np.tensor.has_grad());
    const auto ema = state.ema.parameters()[0];
    const auto student = state.student.parameters()[0];
    for (std::int64_t j = 0; j < ema.numel(); ++j)
      EXPECT_EQ(ema.at(j), 0.95F * before[static_cast<std::size_t>(j)] + (1.0F - 0.95F) * student.at(j));
  }
  EXPECT_EQ(state.step, 3);
  EXPECT_EQ(state.loss_history.size(), 3U);
  EXPECT_NE(parameter_checksum(state.student.named_parameters()), teacher_sum);
}

TEST(LcdStep, RejectsUnfrozenTeacher) {
  DiffusionTransformer teacher(tiny(), 5);
  auto state = TrainState::from_teacher(teacher);
  const auto head = ConsistencyHead::for_schedule(schedule());
  Rng data(1);
  const auto z0 = randn({2, 8, 8}, data);
  const std::vector<int> c{0, 1};
  Rng rng(3);
  EXPECT_THROW(lcd_step(state, teacher, schedule(), head, z0, c, LCDConfig{}, rng), Error);
}

TEST(LcdStep, SameRngSameUpdate) {
  const auto teacher = random_teacher(5);
  auto a = TrainState::from_teacher(teacher);
  auto b = TrainState::from_teacher(teacher);
  const auto head = ConsistencyHead::for_schedule(schedule());
  Rng data(1);
  const auto z0 = randn({3, 8, 8}, data);
  const std::vector<int> c{0, 1, 2};
  for (int i = 0; i < 2; ++i) {
    Rng ra = Rng(11).fork(i), rb = Rng(11).fork(i);
    EXPECT_EQ(lcd_step(a, teacher, schedule(), head, z0, c, LCDConfig{}, ra).loss,
              lcd_step(b, teacher, schedule(), head, z0, c, LCDConfig{}, rb).loss);
  }
  EXPECT_EQ(parameter_checksum(a.student.named_parameters()), parameter_checksum(b.student.named_parameters()));
  EXPECT_EQ(parameter_checksum(a.ema.named_parameters()), parameter_checksum(b.ema.named_parameters()));
}

TEST(LcdConfig, Validation) {
  LCDConfig c;
  EXPECT_NO_THROW(c.validate(1000));
  c.k = 1000;
  EXPECT_THROW(c.validate(1000), ConfigError);
  c = LCDConfig{};
  c.mu = 1.0F;
  EXPECT_THROW(c.validate(1000), ConfigError);
  c = LCDConfig{};
  c.omega_fix = -0.5F;
  EXPECT_THROW(c.validate(1000), ConfigError);
}

}  // namespace
}  // namespace lcdlab
