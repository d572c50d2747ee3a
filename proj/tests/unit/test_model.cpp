#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "lcdlab/distill.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/model.hpp"
#include "lcdlab/ops.hpp"
#include "lcdlab/solver.hpp"

namespace lcdlab {
namespace {

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

const NoiseSchedule& schedule() {
  static const NoiseSchedule s(ScheduleKind::Linear, 1e-4, 0.02, 1000);
  return s;
}

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return randn(shape, rng);
}

TEST(DenoiserConfig, Invariants) {
  auto c = tiny();
  EXPECT_NO_THROW(c.validate());
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.depth = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.depth = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Patchify, RoundTripAndLayout) {
  const auto x = noise({2, 8, 8}, 1);
  const auto p = patchify(x, 2);
  EXPECT_EQ(p.shape(), (Shape{2, 16, 4}));
  // patch (row 1, col 2) holds pixels (2..3, 4..5)
  EXPECT_EQ(p.at(1 * 4 * 4 + 2 * 4 + 3), x.at(3 * 8 + 5));
  const auto back = unpatchify(p, 8, 2);
  EXPECT_EQ(back.to_vector(), x.to_vector());
}

TEST(Denoiser, FreshModelPredictsZero) {
  const DiffusionTransformer m(tiny(), 3);
  const std::vector<int> t{10, 900}, c{0, 3};
  const auto y = m.forward_eps(noise({2, 8, 8}, 2), t, c);
  for (float v : y.data()) EXPECT_EQ(v, 0.0F);
}

TEST(Denoiser, DegenerateWeightsGiveConstantBias) {
  DiffusionTransformer m(tiny(), 3);
  Rng rng(9);
  std::vector<float> b(4);
  for (auto np : m.named_parameters()) {
    auto d = np.tensor.mutable_data();
    std::fill(d.begin(), d.end(), 0.0F);
    if (np.name == "final.out.bias")
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = b[i] = rng.normal();
  }
  const std::vector<int> t{7, 333}, c{1, 2};
  const auto y = m.forward_eps(noise({2, 8, 8}, 4), t, c);
  for (int n = 0; n < 2; ++n)
    for (int r = 0; r < 8; ++r)
      for (int col = 0; col < 8; ++col) EXPECT_EQ(y.at(n * 64 + r * 8 + col), b[(r % 2) * 2 + col % 2]);
}

TEST(Denoiser, FullModelGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {5, 6, 7}) {
    DiffusionTransformer m(tiny(), seed);
    Rng rng(seed + 100);
    randomize_parameters(m.named_parameters(), rng, 0.3F);
    const auto z = noise({2, 8, 8}, seed + 200);
    const auto eps = noise({2, 8, 8}, seed + 300);
    const std::vector<int> t{50, 700}, c{2, 3};
    const auto r = testing::grad_check(
        [&](const std::vector<Tensor>&) { return ops::square(ops::sub(m.forward_eps(z, t, c), eps)); },
        m.parameters(), 2e-2, 32, seed, true);
    const auto names = m.named_parameters();
    for (std::size_t i = 0; i < names.size(); ++i) EXPECT_LE(r.rel_err[i], 1e-3) << names[i].name << " seed " << seed;
  }
}

TEST(Denoiser, NullConditionDiffersAfterTraining) {
  DiffusionTransformer m(tiny(), 5);
  AdamW opt(m.parameters());
  Rng data_rng(1);
  const auto z0 = randn({8, 8, 8}, data_rng);
  const std::vector<int> classes{0, 1, 2, 0, 1, 2, 0, 1};
  for (int i = 0; i < 10; ++i) {
    Rng rng = Rng(2).fork(i);
    teacher_train_step(m, opt, schedule(), z0, classes, rng, 1e-3F, 0.3F);
  }
  NoGradGuard guard;
  const auto z = noise({1, 8, 8}, 3);
  const std::vector<int> t{400}, c{1}, null{m.null_class()};
  const auto a = m.forward_eps(z, t, c).to_vector();
  const auto b = m.forward_eps(z, t, null).to_vector();
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(static_cast<double>(a[i]) - b[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Denoiser, RejectsBadClassOrTimestep) {
  const DiffusionTransformer m(tiny(), 3);
  const auto z = noise({1, 8, 8}, 2);
  const std::vector<int> t{10}, bad_t{-1}, bad_c{4}, c{0};
  EXPECT_THROW(m.forward_eps(z, t, bad_c), ConfigError);
  EXPECT_THROW(m.forward_eps(z, bad_t, c), ConfigError);
  EXPECT_THROW(m.forward_eps(noise({1, 6, 6}, 2), t, c), ShapeError);
}

TEST(Consistency, PredictX0Reconstructs) {
  const auto z = noise({3, 8, 8}, 1);
  const auto e = noise({3, 8, 8}, 2);
  const std::vector<int> t{1, 500, 1000};
  const auto x0 = predict_x0(schedule(), z, t, e);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 64; ++j) {
      const double rec = schedule().sqrt_alpha_bar(t[i]) * x0.at(i * 64 + j) + schedule().sigma(t[i]) * e.at(i * 64 + j);
      EXPECT_NEAR(rec, z.at(i * 64 + j), 1e-5 * (1.0 + std::abs(z.at(i * 64 + j))));
    }
}

TEST(Consistency, HeadCoefficients) {
  const auto h = ConsistencyHead::for_schedule(schedule());
  EXPECT_DOUBLE_EQ(h.timestep_scaling, 10.0);
  EXPECT_EQ(h.c_skip(0), 1.0);
  EXPECT_EQ(h.c_out(0), 0.0);
  for (int t = 1; t <= 1000; ++t) {
    EXPECT_LT(h.c_skip(t), h.c_skip(t - 1));
    EXPECT_GT(h.c_out(t), h.c_out(t - 1));
    EXPECT_GE(h.c_skip(t), 0.0);
    EXPECT_LE(h.c_out(t), 1.0);
    // σ_d² / ((st)² + σ_d²) directly
    const double st = 10.0 * t;
    EXPECT_NEAR(h.c_skip(t), 0.25 / (st * st + 0.25), 1e-15);
    EXPECT_NEAR(h.c_out(t), st / std::sqrt(st * st + 0.25), 1e-15);
  }
  const NoiseSchedule short_s(ScheduleKind::Linear, 1e-4, 0.02, 250);
  EXPECT_DOUBLE_EQ(ConsistencyHead::for_schedule(short_s).timestep_scaling, 40.0);
}

TEST(Consistency, BoundaryIsExact) {
  DiffusionTransformer m(tiny(), 5);
  Rng rng(3);
  randomize_parameters(m.named_parameters(), rng, 0.5F);
  const auto head = ConsistencyHead::for_schedule(schedule());
  for (int i = 0; i < 20; ++i) {
    const auto z = noise({2, 8, 8}, 100 + i);
    const std::vector<int> t{0, 0}, c{i % 4, (i + 1) % 4};
    const auto f = consistency_forward(eps_fn(m), head, schedule(), z, t, c);
    EXPECT_EQ(f.to_vector(), z.to_vector());
  }
}

TEST(Student, CopyChecksumAndIndependence) {
  DiffusionTransformer teacher(tiny(), 5);
  Rng rng(3);
  randomize_parameters(teacher.named_parameters(), rng, 0.2F);
  auto student = init_student_from_teacher(teacher);
  EXPECT_EQ(parameter_checksum(student.named_parameters()), parameter_checksum(teacher.named_parameters()));
  student.parameters()[0].mutable_data()[0] += 1.0F;
  EXPECT_NE(parameter_checksum(student.named_parameters()), parameter_checksum(teacher.named_parameters()));
}

TEST(Denoiser, SameSeedSameWeights) {
  const DiffusionTransformer a(tiny(), 17), b(tiny(), 17), c(tiny(), 18);
  EXPECT_EQ(parameter_checksum(a.named_parameters()), parameter_checksum(b.named_parameters()));
  EXPECT_NE(parameter_checksum(a.named_parameters()), parameter_checksum(c.named_parameters()));
}

}  // namespace
}  // namespace lcdlab
