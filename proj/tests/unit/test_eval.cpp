#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "lcdlab/data.hpp"
#include "lcdlab/error.hpp"
#include "lcdlab/eval.hpp"
#include "lcdlab/rng.hpp"

namespace lcdlab {
namespace {

Tensor gaussian_rows(std::int64_t n, std::int64_t d, double mean, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(n * d));
  for (auto& x : v) x = static_cast<float>(mean + rng.normal());
  return Tensor::from_data({n, d}, v);
}

// Unbiased MMD² straight from the definition, in double.
double direct_mmd2(const Tensor& x, const Tensor& y, double h) {
  const auto n = x.dim(0), m = y.dim(0), d = x.numel() / n;
  const auto k = [&](const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j) {
    double s = 0.0;
    for (std::int64_t q = 0; q < d; ++q) {
      const double diff = static_cast<double>(a.at(i * d + q)) - b.at(j * d + q);
      s += diff * diff;
    }
    return std::exp(-s / (2 * h * h));
  };
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      if (i != j) xx += k(x, i, x, j);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      if (i != j) yy += k(y, i, y, j);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) xy += k(x, i, y, j);
  return xx / static_cast<double>(n * (n - 1)) + yy / static_cast<double>(m * (m - 1)) -
         2 * xy / static_cast<double>(n * m);
}

TEST(Mmd, MatchesDefinition) {
  const auto x = gaussian_rows(20, 3, 0.0, 1);
  const auto y = gaussian_rows(15, 3, 0.7, 2);
  for (double h : {0.5, 1.0, 3.0}) {
    const auto r = mmd_rbf(x, y, h);
    EXPECT_NEAR(r.mmd2_unbiased, direct_mmd2(x, y, h), 1e-9);
    EXPECT_EQ(r.bandwidth, h);
    EXPECT_GE(r.mmd2_biased, r.mmd2_unbiased);
  }
}

TEST(Mmd, MedianBandwidth) {
  const auto x = gaussian_rows(4, 2, 0.0, 3);
  const auto y = gaussian_rows(3, 2, 1.0, 4);
  std::vector<double> d2;
  std::vector<std::vector<double>> pts;
  for (const auto* t : {&x, &y})
    for (std::int64_t i = 0; i < t->dim(0); ++i) pts.push_back({t->at(i * 2), t->at(i * 2 + 1)});
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      d2.push_back(std::pow(pts[i][0] - pts[j][0], 2) + std::pow(pts[i][1] - pts[j][1], 2));
  std::sort(d2.begin(), d2.end());
  ASSERT_EQ(d2.size(), 21U);
  EXPECT_NEAR(mmd_rbf(x, y).bandwidth, std::sqrt(d2[10] / 2), 1e-6);
}

TEST(Mmd, SelfDistance) {
  const auto x = gaussian_rows(25, 3, 0.0, 13);
  const auto r = mmd_rbf(x, x);
  EXPECT_NEAR(r.mmd2_biased, 0.0, 1e-12);
  EXPECT_LE(r.mmd2_unbiased, 0.0);
  EXPECT_EQ(r.reported(), 0.0);
}

TEST(Mmd, WiderKernelDoesNotInflateSameMeanDistance) {
  const auto x = gaussian_rows(60, 2, 0.0, 14);
  const auto y = gaussian_rows(60, 2, 0.0, 15);
  for (double h : {0.25, 0.5, 1.0, 2.0}) {
    const double narrow = mmd_rbf(x, y, h).mmd2_unbiased, wide = mmd_rbf(x, y, 2 * h).mmd2_unbiased;
    EXPECT_NEAR(wide, direct_mmd2(x, y, 2 * h), 1e-9);
    EXPECT_LE(wide, std::max(narrow, 0.0) + 0.02);
  }
}

TEST(Mmd, Symmetric) {
  const auto x = gaussian_rows(30, 4, 0.0, 5);
  const auto y = gaussian_rows(40, 4, 0.5, 6);
  const auto a = mmd_rbf(x, y), b = mmd_rbf(y, x);
  EXPECT_NEAR(a.mmd2_unbiased, b.mmd2_unbiased, 1e-12);
  EXPECT_NEAR(a.bandwidth, b.bandwidth, 1e-12);
}

TEST(Mmd, PermutationTestSeparatesShiftedGaussians) {
  const auto x = gaussian_rows(500, 1, 0.0, 7);
  const auto y = gaussian_rows(500, 1, 3.0, 8);
  const double h = 1.0;
  const double observed = mmd_rbf(x, y, h).mmd2_unbiased;
  std::vector<float> pooled = x.to_vector();
  const auto yv = y.to_vector();
  pooled.insert(pooled.end(), yv.begin(), yv.end());
  Rng rng(9);
  int exceed = 0;
  for (int p = 0; p < 99; ++p) {
    for (std::size_t i = pooled.size() - 1; i > 0; --i)
      std::swap(pooled[i], pooled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
    const auto a = Tensor::from_data({500, 1}, std::vector<float>(pooled.begin(), pooled.begin() + 500));
    const auto b = Tensor::from_data({500, 1}, std::vector<float>(pooled.begin() + 500, pooled.end()));
    exceed += mmd_rbf(a, b, h).mmd2_unbiased >= observed;
  }
  EXPECT_EQ(exceed, 0);  // beyond the 99th percentile
  // same law: the unbiased estimate hovers around zero
  const auto z = gaussian_rows(500, 1, 0.0, 10);
  EXPECT_LT(std::abs(mmd_rbf(x, z, h).mmd2_unbiased), 0.1 * observed);
}

TEST(Mmd, RejectsMismatchedRows) {
  EXPECT_THROW(mmd_rbf(gaussian_rows(5, 2, 0, 1), gaussian_rows(5, 3, 0, 2)), ShapeError);
  EXPECT_THROW(mmd_rbf(gaussian_rows(1, 2, 0, 1), gaussian_rows(5, 2, 0, 2)), Error);
}

ToyDataset shapes() {
  ToyDatasetSpec s;
  s.n_samples = 200;
  s.seed = 11;
  return ToyDataset(s);
}

TEST(EdgeIou, ImageAgainstItsOwnMapIsOne) {
  const auto d = shapes();
  for (std::int64_t i = 0; i < 10; ++i) {
    const auto img = d.image(i);
    const auto map = sobel_edges(img, 16, 16);
    EXPECT_DOUBLE_EQ(edge_iou(img, map, 16), 1.0);
  }
  const std::vector<float> flat(256, -1.0F), empty(256, 0.0F);
  EXPECT_DOUBLE_EQ(edge_iou(flat, empty, 16), 1.0);
}

TEST(EdgeIou, NoiseAgainstShapesFollowsIndependenceOracle) {
  // Unrelated masks with edge densities p and q overlap like independent
  // coin flips, so E[IoU] ~ pq / (p + q - pq). White noise has dense edges
  // at the 0.3 threshold, which puts this near 0.2 rather than well below.
  const auto d = shapes();
  double total = 0.0, oracle = 0.0;
  Rng rng(12);
  for (std::int64_t i = 0; i < 100; ++i) {
    const auto map = sobel_edges(d.image(i), 16, 16);
    std::vector<float> noise(256);
    for (auto& v : noise) v = static_cast<float>(2 * rng.uniform() - 1);
    const double iou = edge_iou(noise, map, 16);
    total += iou;
    const auto e = sobel_edges(noise, 16, 16);
    double p = 0.0, q = 0.0;
    for (int j = 0; j < 256; ++j) {
      p += e[static_cast<std::size_t>(j)] >= 0.3F;
      q += map[static_cast<std::size_t>(j)] >= 0.3F;
    }
    p /= 256;
    q /= 256;
    oracle += p * q / (p + q - p * q);
  }
  EXPECT_NEAR(total / 100, oracle / 100, 0.03);
  EXPECT_LT(total / 100, 0.3);
}

TEST(EdgeIou, BlankImageAndMismatch) {
  const auto d = shapes();
  const std::vector<float> blank(256, 0.2F);
  EXPECT_DOUBLE_EQ(edge_iou(blank, sobel_edges(d.image(0), 16, 16), 16), 0.0);
  const std::vector<float> small(64, 0.0F);
  EXPECT_THROW(edge_iou(small, sobel_edges(d.image(0), 16, 16), 16), ShapeError);
}

TEST(EdgeIou, SymmetricInMasks) {
  const auto d = shapes();
  for (std::int64_t i = 0; i < 20; ++i) {
    const auto a = d.image(i), b = d.image(i + 20);
    EXPECT_DOUBLE_EQ(edge_iou(a, sobel_edges(b, 16, 16), 16), edge_iou(b, sobel_edges(a, 16, 16), 16));
  }
}

TEST(EdgeIou, MeanOverBatch) {
  const auto d = shapes();
  const std::vector<int> idx{0, 1, 2, 3};
  const auto imgs = d.gather_images(idx);
  EXPECT_DOUBLE_EQ(mean_edge_iou(imgs, d.gather_edges(idx)), 1.0);
  const std::vector<int> shifted{1, 2, 3, 0};
  const double mixed = mean_edge_iou(imgs, d.gather_edges(shifted));
  double expect = 0.0;
  for (int i = 0; i < 4; ++i)
    expect += edge_iou(d.image(i), sobel_edges(d.image(shifted[static_cast<std::size_t>(i)]), 16, 16), 16);
  EXPECT_NEAR(mixed, expect / 4, 1e-12);
}

TEST(SuddenConverge, HalfwayStep) {
  const std::vector<std::pair<std::int64_t, double>> curve{{0, 0.1}, {100, 0.12}, {200, 0.5}, {300, 0.6}};
  EXPECT_EQ(sudden_converge_step(curve), 200);
  const std::vector<std::pair<std::int64_t, double>> flat{{0, 0.3}, {100, 0.3}, {200, 0.2}};
  EXPECT_FALSE(sudden_converge_step(flat).has_value());
  EXPECT_FALSE(sudden_converge_step({{0, 0.1}}).has_value());
}

TEST(Bench, FactoryWorkIsNotTimed) {
  int built = 0, calls = 0;
  const auto r = benchmark_sampler(
      "slow-setup", 4,
      [&] {
        ++built;
        std::this_thread::sleep_for(std::chrono::milliseconds(60));
        return std::function<void()>([&] {
          ++calls;
          std::this_thread::sleep_for(std::chrono::milliseconds(2));
        });
      },
      5, 2);
  EXPECT_EQ(built, 1);
  EXPECT_EQ(calls, 7);
  EXPECT_EQ(r.reps, 5);
  EXPECT_GE(r.mean_ms, 1.9);
  EXPECT_LT(r.mean_ms, 20.0);
  EXPECT_GE(r.std_ms, 0.0);
  const auto csv = bench_csv({r});
  EXPECT_NE(csv.find("slow-setup"), std::string::npos);
}

TEST(Fingerprint, TracksConfig) {
  Config a;
  Config b;
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.lcd.k = 10;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
  MetricReport m{"mmd2_rbf", 0.25, 10, 20, 3, config_fingerprint(a)};
  const auto j = m.to_json();
  EXPECT_EQ(j.at("metric"), "mmd2_rbf");
  EXPECT_EQ(j.at("n_x"), 10);
}

TEST(Ablation, NCopyGridClippedToDepth) {
  Config base;
  base.model.depth = 8;
  std::vector<std::string> names;
  for (const auto& [name, cfg] : ablation_configs(AblationKind::NCopy, base)) {
    names.push_back(name);
    EXPECT_LE(cfg.control.n_copy, 8);
  }
  EXPECT_EQ(names, (std::vector<std::string>{"n_copy=1", "n_copy=4", "n_copy=7", "n_copy=8"}));
  EXPECT_EQ(ablation_configs(AblationKind::CfgScale, base).size(), 2U);
  EXPECT_EQ(ablation_kind_from_string("n_copy"), AblationKind::NCopy);
  EXPECT_THROW(ablation_kind_from_string("width"), ConfigError);
}

}  // namespace
}  // namespace lcdlab
