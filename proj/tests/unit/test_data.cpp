#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "lcdlab/data.hpp"
#include "lcdlab/error.hpp"

namespace lcdlab {
namespace {

namespace fs = std::filesystem;

ToyDatasetSpec small_spec() {
  ToyDatasetSpec s;
  s.n_samples = 64;
  s.image_size = 16;
  s.num_classes = 4;
  s.seed = 3;
  return s;
}

// Plain 3x3 correlation with replicate borders, in double.
std::vector<double> direct_sobel(const std::vector<float>& img, int h, int w) {
  static const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  std::vector<double> mag(img.size());
  double peak = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gx = 0.0, gy = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::min(std::max(y + dy, 0), h - 1), xx = std::min(std::max(x + dx, 0), w - 1);
          const double v = img[static_cast<std::size_t>(yy * w + xx)];
          gx += kx[dy + 1][dx + 1] * v;
          gy += ky[dy + 1][dx + 1] * v;
        }
      mag[static_cast<std::size_t>(y * w + x)] = std::hypot(gx, gy);
      peak = std::max(peak, mag[static_cast<std::size_t>(y * w + x)]);
    }
  if (peak > 0)
    for (auto& m : mag) m /= peak;
  return mag;
}

TEST(ToyData, DeterministicAndInRange) {
  const ToyDataset a(small_spec()), b(small_spec());
  EXPECT_EQ(a.images(), b.images());
  EXPECT_EQ(a.labels(), b.labels());
  for (float v : a.images()) {
    EXPECT_GE(v, -1.0F);
    EXPECT_LE(v, 1.0F);
  }
  auto other = small_spec();
  other.seed = 4;
  EXPECT_NE(ToyDataset(other).images(), a.images());
  // a sample does not depend on how many others were drawn
  const auto s = make_toy_sample(small_spec(), 17);
  EXPECT_EQ(s.label, a.label(17));
  EXPECT_TRUE(std::equal(s.pixels.begin(), s.pixels.end(), a.image(17).begin()));
}

TEST(ToyData, EveryImageHasAShape) {
  const ToyDataset d(small_spec());
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const auto img = d.image(i);
    EXPECT_EQ(*std::min_element(img.begin(), img.end()), -1.0F);
    EXPECT_GT(*std::max_element(img.begin(), img.end()), -0.5F) << i;
  }
}

TEST(ToyData, ClassesAreUniform) {
  auto spec = small_spec();
  spec.n_samples = 10000;
  std::vector<int> counts(4, 0);
  for (std::int64_t i = 0; i < spec.n_samples; ++i) ++counts[static_cast<std::size_t>(make_toy_sample(spec, i).label)];
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 2500.0) * (c - 2500.0) / 2500.0;
  EXPECT_LT(chi2, 16.27);  // χ²₃ at p = 0.001
}

TEST(ToyData, SpecValidation) {
  auto s = small_spec();
  s.num_classes = kMaxShapeFamilies + 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.n_samples = 0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Sobel, MatchesDirectConvolution) {
  const ToyDataset d(small_spec());
  for (std::int64_t i = 0; i < 8; ++i) {
    const std::vector<float> img(d.image(i).begin(), d.image(i).end());
    const auto got = sobel_edges(img, 16, 16);
    const auto want = direct_sobel(img, 16, 16);
    for (std::size_t j = 0; j < got.size(); ++j) ASSERT_NEAR(got[j], want[j], 1e-6) << i << ":" << j;
    EXPECT_FLOAT_EQ(*std::max_element(got.begin(), got.end()), 1.0F);
  }
}

TEST(Sobel, SignInvariantAndConstantIsZero) {
  const ToyDataset d(small_spec());
  std::vector<float> img(d.image(5).begin(), d.image(5).end());
  std::vector<float> neg(img.size());
  std::transform(img.begin(), img.end(), neg.begin(), [](float v) { return -v; });
  EXPECT_EQ(sobel_edges(img, 16, 16), sobel_edges(neg, 16, 16));
  const std::vector<float> flat(64, 0.3F);
  for (float v : sobel_edges(flat, 8, 8)) EXPECT_EQ(v, 0.0F);
}

TEST(Sobel, BatchedMatchesSingle) {
  const ToyDataset d(small_spec());
  const std::vector<int> idx{3, 9};
  const auto batch = d.gather_edges(idx);
  EXPECT_EQ(batch.shape(), (Shape{2, 16, 16}));
  const std::vector<float> img(d.image(9).begin(), d.image(9).end());
  const auto single = sobel_edges(img, 16, 16);
  for (int j = 0; j < 256; ++j) EXPECT_EQ(batch.at(256 + j), single[static_cast<std::size_t>(j)]);
}

TEST(Encoder, IdentityRoundTrip) {
  const ToyDataset d(small_spec());
  const std::vector<int> idx{0, 1, 2};
  const auto x = d.gather_images(idx);
  const Encoder e{EncoderKind::Identity};
  EXPECT_EQ(e.decode(e.encode(x)).to_vector(), x.to_vector());
  EXPECT_EQ(e.latent_size(16), 16);
}

TEST(Encoder, AvgPoolMeansAndRoundTrip) {
  const ToyDataset d(small_spec());
  const std::vector<int> idx{0, 1};
  const auto x = d.gather_images(idx);
  const Encoder e{EncoderKind::AvgPool2};
  const auto z = e.encode(x);
  EXPECT_EQ(z.shape(), (Shape{2, 8, 8}));
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 8; ++y)
      for (int xx = 0; xx < 8; ++xx) {
        double s = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) s += x.at(n * 256 + (2 * y + dy) * 16 + 2 * xx + dx);
        EXPECT_NEAR(z.at(n * 64 + y * 8 + xx), s / 4, 1e-6);
      }
  // decode is a right inverse of encode
  EXPECT_EQ(e.encode(e.decode(z)).to_vector(), z.to_vector());
  EXPECT_THROW(e.latent_size(15), ShapeError);
  EXPECT_EQ(encoder_kind_from_string(to_string(EncoderKind::AvgPool2)), EncoderKind::AvgPool2);
}

TEST(BatchStream, EachSampleOncePerEpoch) {
  const BatchStream s(96, 32, 5);
  std::vector<int> visits(96, 0);
  for (std::int64_t step = 0; step < 6; ++step)
    for (int i : s.batch(step)) ++visits[static_cast<std::size_t>(i)];
  for (int v : visits) EXPECT_EQ(v, 2);
  EXPECT_NE(s.batch(0), s.batch(3));  // the second epoch is reshuffled
}

TEST(BatchStream, PartialBatchDroppedCountsWithinOne) {
  const BatchStream s(100, 32, 5);
  EXPECT_EQ(s.batches_per_epoch(), 3);
  std::vector<int> visits(100, 0);
  for (std::int64_t step = 0; step < 6; ++step) {
    const auto b = s.batch(step);
    EXPECT_EQ(b.size(), 32U);
    for (int i : b) ++visits[static_cast<std::size_t>(i)];
  }
  for (int v : visits) {
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 2);
  }
  int total = 0;
  for (int v : visits) total += v;
  EXPECT_EQ(total, 192);
}

TEST(BatchStream, PureFunctionOfStep) {
  const BatchStream a(100, 10, 1), b(100, 10, 1);
  EXPECT_EQ(a.batch(37), b.batch(37));
  auto p = a.epoch_permutation(2);
  std::sort(p.begin(), p.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], i);
}

class DatasetFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("lcdlab-data-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "-" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(DatasetFiles, SaveLoadRoundTrip) {
  const ToyDataset d(small_spec());
  save_dataset(d, dir_);
  const auto back = load_dataset(dir_);
  EXPECT_EQ(back.spec(), d.spec());
  EXPECT_EQ(back.images(), d.images());
  EXPECT_EQ(back.labels(), d.labels());
}

TEST_F(DatasetFiles, CorruptBlobIsRejected) {
  const ToyDataset d(small_spec());
  save_dataset(d, dir_);
  {
    std::fstream f(dir_ / "images.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(100);
    const char old = static_cast<char>(f.get());
    f.seekp(100);
    f.put(static_cast<char>(old ^ 0x5a));
  }
  EXPECT_THROW(load_dataset(dir_), FormatError);
  EXPECT_THROW(load_dataset(dir_ / "missing"), Error);
}

}  // namespace
}  // namespace lcdlab
