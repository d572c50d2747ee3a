#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lcdlab/rng.hpp"
#include "lcdlab/tensor.hpp"

namespace lcdlab {

/// Shape families, in class-index order.
enum class ShapeFamily { Circle, Square, Triangle, Cross, Ring, Diamond };
inline constexpr int kMaxShapeFamilies = 6;

struct ToyDatasetSpec {
  std::int64_t n_samples = 4096;
  int image_size = 16;
  int num_classes = 4;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ToyDatasetSpec&) const = default;
};

struct ToySample {
  std::vector<float> pixels;  // image_size², row-major, in [-1, 1]
  int label = 0;
};

/// Draws sample `index`: an antialiased (4x4 supersampled) shape of a random
/// family, position, size and brightness on a -1 background.
ToySample make_toy_sample(const ToyDatasetSpec& spec, std::int64_t index);

class ToyDataset {
 public:
  explicit ToyDataset(const ToyDatasetSpec& spec);
  ToyDataset(const ToyDatasetSpec& spec, std::vector<float> images, std::vector<int> labels);

  const ToyDatasetSpec& spec() const { return spec_; }
  std::int64_t size() const { return spec_.n_samples; }
  int image_size() const { return spec_.image_size; }
  std::span<const float> image(std::int64_t index) const;
  int label(std::int64_t index) const { return labels_.at(static_cast<std::size_t>(index)); }
  const std::vector<float>& images() const { return images_; }
  const std::vector<int>& labels() const { return labels_; }

  /// [len(indices), S, S] images and their labels.
  Tensor gather_images(std::span<const int> indices) const;
  std::vector<int> gather_labels(std::span<const int> indices) const;
  /// Sobel condition maps for the selected images, [len(indices), S, S].
  Tensor gather_edges(std::span<const int> indices) const;

 private:
  ToyDatasetSpec spec_;
  std::vector<float> images_;
  std::vector<int> labels_;
};

/// Writes `manifest.json` (spec, labels, shape, CRC-32 of the blob) and
/// `images.f32` (little-endian float32) into `dir`.
void save_dataset(const ToyDataset& dataset, const std::filesystem::path& dir);
/// Loads and validates the checksum; throws FormatError on mismatch.
ToyDataset load_dataset(const std::filesystem::path& dir);

/// Sobel gradient magnitude with replicate padding, max-normalized to [0,1].
/// A constant image yields an all-zero map.
std::vector<float> sobel_edges(std::span<const float> image, int height, int width);
/// Batched version over [B, H, W].
Tensor sobel_edges(const Tensor& images);

enum class EncoderKind { Identity, AvgPool2 };

std::string to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& name);

/// Pluggable E(·)/decoder pair. AvgPool2 averages 2x2 blocks; its decoder
/// repeats each latent value over its block.
struct Encoder {
  EncoderKind kind = EncoderKind::Identity;

  Tensor encode(const Tensor& images) const;
  Tensor decode(const Tensor& latents) const;
  int latent_size(int image_size) const;
};

/// Deterministic shuffled mini-batches. Each epoch is a fresh permutation
/// derived from (seed, epoch); the trailing partial batch is dropped. Batch
/// contents are a pure function of the step index, so streams resume exactly.
class BatchStream {
 public:
  BatchStream(std::int64_t n_samples, int batch_size, std::uint64_t seed);

  std::int64_t batches_per_epoch() const { return n_ / batch_; }
  std::vector<int> batch(std::int64_t step) const;
  std::vector<int> epoch_permutation(std::int64_t epoch) const;

 private:
  std::int64_t n_;
  int batch_;
  std::uint64_t seed_;
};

}  // namespace lcdlab
