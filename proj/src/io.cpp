#include "lcdlab/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lcdlab/error.hpp"

namespace lcdlab {

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1U << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io: write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

void append_f32_le(std::vector<unsigned char>& out, std::span<const float> values) {
  const auto start = out.size();
  out.resize(start + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[start + i * 4 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
}

std::vector<float> decode_f32_le(std::span<const unsigned char> bytes) {
  if (bytes.size() % 4 != 0) throw FormatError("io: float32 payload length not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

unsigned char to_gray8(float v) {
  const float c = std::clamp(v, -1.0F, 1.0F);
  return static_cast<unsigned char>(std::lround((c + 1.0F) * 0.5F * 255.0F));
}

std::vector<unsigned char> encode_pgm(int width, int height, std::span<const unsigned char> pixels) {
  if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != pixels.size())
    throw ShapeError("pgm: pixel count does not match dimensions");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

void write_pgm_grid(const std::filesystem::path& path, const Tensor& images) {
  if (images.rank() != 3) throw ShapeError("pgm: expected [B,H,W], got " + shape_str(images.shape()));
  const auto n = static_cast<int>(images.dim(0)), h = static_cast<int>(images.dim(1)), w = static_cast<int>(images.dim(2));
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  std::vector<unsigned char> px(static_cast<std::size_t>(rows * h * cols * w), 0);
  auto d = images.data();
  for (int k = 0; k < n; ++k) {
    const int gr = k / cols, gc = k % cols;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        px[static_cast<std::size_t>((gr * h + y) * cols * w + gc * w + x)] =
            to_gray8(d[static_cast<std::size_t>((k * h + y) * w + x)]);
  }
  write_file(path, encode_pgm(cols * w, rows * h, px));
}

GrayImage decode_pgm(std::span<const unsigned char> bytes) {
  std::string head(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(bytes.size(), 64)));
  std::istringstream is(head);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw FormatError("pgm: unsupported header");
  const auto offset = static_cast<std::size_t>(is.tellg()) + 1;
  if (bytes.size() != offset + static_cast<std::size_t>(w * h)) throw FormatError("pgm: truncated payload");
  return {w, h, {bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end()}};
}

}  // namespace lcdlab
