#include "lcdlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "lcdlab/error.hpp"
#include "lcdlab/io.hpp"

namespace lcdlab {

void ToyDatasetSpec::validate() const {
  if (n_samples < 1) throw ConfigError("data: n_samples must be >= 1");
  if (image_size < 8) throw ConfigError("data: image_size must be >= 8");
  if (num_classes < 2 || num_classes > kMaxShapeFamilies)
    throw ConfigError("data: num_classes must lie in [2, " + std::to_string(kMaxShapeFamilies) + "]");
}

namespace {

bool inside(ShapeFamily family, double dx, double dy, double r) {
  switch (family) {
    case ShapeFamily::Circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeFamily::Square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeFamily::Triangle: {
      // Apex up at (0, -r); base at y = 0.8 r from x = -r to x = r.
      if (dy > 0.8 * r) return false;
      const double half_width = r * (dy + r) / (1.8 * r);
      return dy >= -r && std::abs(dx) <= half_width;
    }
    case ShapeFamily::Cross:
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
    case ShapeFamily::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case ShapeFamily::Diamond:
      return std::abs(dx) + std::abs(dy) <= r;
  }
  return false;
}

}  // namespace

ToySample make_toy_sample(const ToyDatasetSpec& spec, std::int64_t index) {
  Rng rng = Rng(spec.seed).split("toy-data").fork(static_cast<std::uint64_t>(index));
  const int s = spec.image_size;
  ToySample out;
  out.label = rng.uniform_int(0, spec.num_classes - 1);
  const auto family = static_cast<ShapeFamily>(out.label);
  const double cx = s * (0.3 + 0.4 * rng.uniform_double());
  const double cy = s * (0.3 + 0.4 * rng.uniform_double());
  const double r = s * (0.2 + 0.15 * rng.uniform_double());
  const double fg = 0.4 + 0.6 * rng.uniform_double();
  constexpr int kSuper = 4;
  out.pixels.resize(static_cast<std::size_t>(s * s));
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
          hits += inside(family, px - cx, py - cy, r) ? 1 : 0;
        }
      const double cov = static_cast<double>(hits) / (kSuper * kSuper);
      out.pixels[static_cast<std::size_t>(y * s + x)] = static_cast<float>(-1.0 + cov * (fg + 1.0));
    }
  return out;
}

ToyDataset::ToyDataset(const ToyDatasetSpec& spec) : spec_(spec) {
  spec_.validate();
  const auto per = static_cast<std::size_t>(spec.image_size * spec.image_size);
  images_.resize(static_cast<std::size_t>(spec.n_samples) * per);
  labels_.resize(static_cast<std::size_t>(spec.n_samples));
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    auto sample = make_toy_sample(spec, i);
    std::copy(sample.pixels.begin(), sample.pixels.end(), images_.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::int64_t>(per)));
    labels_[static_cast<std::size_t>(i)] = sample.label;
  }
}

ToyDataset::ToyDataset(const ToyDatasetSpec& spec, std::vector<float> images, std::vector<int> labels)
    : spec_(spec), images_(std::move(images)), labels_(std::move(labels)) {
  spec_.validate();
  if (images_.size() != static_cast<std::size_t>(spec.n_samples * spec.image_size * spec.image_size) ||
      labels_.size() != static_cast<std::size_t>(spec.n_samples))
    throw FormatError("data: image/label counts do not match the dataset spec");
}

std::span<const float> ToyDataset::image(std::int64_t index) const {
  if (index < 0 || index >= size()) throw ConfigError("data: index out of range");
  const auto per = static_cast<std::size_t>(spec_.image_size * spec_.image_size);
  return std::span<const float>(images_).subspan(static_cast<std::size_t>(index) * per, per);
}

Tensor ToyDataset::gather_images(std::span<const int> indices) const {
  const auto per = static_cast<std::size_t>(spec_.image_size * spec_.image_size);
  std::vector<float> v;
  v.reserve(indices.size() * per);
  for (int i : indices) {
    auto img = image(i);
    v.insert(v.end(), img.begin(), img.end());
  }
  return Tensor::from_data({static_cast<std::int64_t>(indices.size()), spec_.image_size, spec_.image_size}, std::move(v));
}

std::vector<int> ToyDataset::gather_labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(label(i));
  return out;
}

Tensor ToyDataset::gather_edges(std::span<const int> indices) const { return sobel_edges(gather_images(indices)); }

void save_dataset(const ToyDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<unsigned char> blob;
  append_f32_le(blob, dataset.images());
  write_file(dir / "images.f32", blob);
  const auto& spec = dataset.spec();
  nlohmann::ordered_json manifest;
  manifest["format"] = "lcdlab-toy-dataset";
  manifest["version"] = 1;
  manifest["spec"] = {{"n_samples", spec.n_samples},
                      {"image_size", spec.image_size},
                      {"num_classes", spec.num_classes},
                      {"seed", spec.seed}};
  manifest["shape"] = {spec.n_samples, spec.image_size, spec.image_size};
  manifest["blob"] = "images.f32";
  manifest["crc32"] = crc32(blob);
  manifest["labels"] = dataset.labels();
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ToyDataset load_dataset(const std::filesystem::path& dir) {
  const auto text = read_file(dir / "manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("data: malformed manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "lcdlab-toy-dataset") throw FormatError("data: not a dataset manifest");
  ToyDatasetSpec spec;
  const auto& s = manifest.at("spec");
  spec.n_samples = s.at("n_samples").get<std::int64_t>();
  spec.image_size = s.at("image_size").get<int>();
  spec.num_classes = s.at("num_classes").get<int>();
  spec.seed = s.at("seed").get<std::uint64_t>();
  const auto blob = read_file(dir / manifest.at("blob").get<std::string>());
  if (crc32(blob) != manifest.at("crc32").get<std::uint32_t>()) throw FormatError("data: image blob checksum mismatch");
  return ToyDataset(spec, decode_f32_le(blob), manifest.at("labels").get<std::vector<int>>());
}

std::vector<float> sobel_edges(std::span<const float> image, int height, int width) {
  if (image.size() != static_cast<std::size_t>(height * width)) throw ShapeError("sobel: image size mismatch");
  auto px = [&](int y, int x) {
    y = std::clamp(y, 0, height - 1);
    x = std::clamp(x, 0, width - 1);
    return static_cast<double>(image[static_cast<std::size_t>(y * width + x)]);
  };
  std::vector<double> mag(image.size());
  double mx = 0.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      const double m = std::sqrt(gx * gx + gy * gy);
      mag[static_cast<std::size_t>(y * width + x)] = m;
      mx = std::max(mx, m);
    }
  std::vector<float> out(image.size(), 0.0F);
  if (mx > 0.0)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(mag[i] / mx);
  return out;
}

Tensor sobel_edges(const Tensor& images) {
  if (images.rank() != 3) throw ShapeError("sobel: expected [B,H,W], got " + shape_str(images.shape()));
  const int h = static_cast<int>(images.dim(1)), w = static_cast<int>(images.dim(2));
  const auto per = static_cast<std::size_t>(h * w);
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(images.numel()));
  auto d = images.data();
  for (std::int64_t b = 0; b < images.dim(0); ++b) {
    auto e = sobel_edges(d.subspan(static_cast<std::size_t>(b) * per, per), h, w);
    out.insert(out.end(), e.begin(), e.end());
  }
  return Tensor::from_data(images.shape(), std::move(out));
}

std::string to_string(EncoderKind kind) { return kind == EncoderKind::Identity ? "identity" : "avgpool2"; }

EncoderKind encoder_kind_from_string(const std::string& name) {
  if (name == "identity") return EncoderKind::Identity;
  if (name == "avgpool2") return EncoderKind::AvgPool2;
  throw ConfigError("encoder: unknown kind '" + name + "' (expected identity or avgpool2)");
}

int Encoder::latent_size(int image_size) const {
  if (kind == EncoderKind::Identity) return image_size;
  if (image_size % 2 != 0) throw ShapeError("encoder: avgpool2 needs an even image size");
  return image_size / 2;
}

Tensor Encoder::encode(const Tensor& images) const {
  if (images.rank() != 3) throw ShapeError("encoder: expected [B,H,W], got " + shape_str(images.shape()));
  if (kind == EncoderKind::Identity) return images.detach();
  const auto b = images.dim(0), h = images.dim(1), w = images.dim(2);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("encoder: avgpool2 needs even spatial extents, got " + shape_str(images.shape()));
  const auto h2 = h / 2, w2 = w / 2;
  auto d = images.data();
  std::vector<float> out(static_cast<std::size_t>(b * h2 * w2));
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < h2; ++y)
      for (std::int64_t x = 0; x < w2; ++x) {
        auto at = [&](std::int64_t yy, std::int64_t xx) { return d[static_cast<std::size_t>((n * h + yy) * w + xx)]; };
        out[static_cast<std::size_t>((n * h2 + y) * w2 + x)] =
            0.25F * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
      }
  return Tensor::from_data({b, h2, w2}, std::move(out));
}

Tensor Encoder::decode(const Tensor& latents) const {
  if (latents.rank() != 3) throw ShapeError("decoder: expected [B,H,W], got " + shape_str(latents.shape()));
  if (kind == EncoderKind::Identity) return latents.detach();
  const auto b = latents.dim(0), h = latents.dim(1), w = latents.dim(2);
  auto d = latents.data();
  std::vector<float> out(static_cast<std::size_t>(b * h * w * 4));
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t x = 0; x < 2 * w; ++x)
        out[static_cast<std::size_t>((n * 2 * h + y) * 2 * w + x)] = d[static_cast<std::size_t>((n * h + y / 2) * w + x / 2)];
  return Tensor::from_data({b, 2 * h, 2 * w}, std::move(out));
}

BatchStream::BatchStream(std::int64_t n_samples, int batch_size, std::uint64_t seed)
    : n_(n_samples), batch_(batch_size), seed_(seed) {
  if (n_samples < 1) throw ConfigError("batches: empty dataset");
  if (batch_size < 1 || batch_size > n_samples)
    throw ConfigError("batches: batch_size must lie in [1, n_samples]");
}

std::vector<int> BatchStream::epoch_permutation(std::int64_t epoch) const {
  std::vector<int> perm(static_cast<std::size_t>(n_));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed_).split("batches").fork(static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = n_ - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, static_cast<int>(i));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

std::vector<int> BatchStream::batch(std::int64_t step) const {
  const auto per_epoch = batches_per_epoch();
  const auto perm = epoch_permutation(step / per_epoch);
  const auto start = (step % per_epoch) * batch_;
  return {perm.begin() + start, perm.begin() + start + batch_};
}

}  // namespace lcdlab
