#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lcdlab/tensor.hpp"

namespace lcdlab {

/// IEEE 802.3 CRC-32 (zlib).
std::uint32_t crc32(std::span<const unsigned char> bytes);

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Little-endian float32 encoding, independent of host byte order.
void append_f32_le(std::vector<unsigned char>& out, std::span<const float> values);
std::vector<float> decode_f32_le(std::span<const unsigned char> bytes);

/// Maps [-1, 1] to 0..255 (clamped, rounded to nearest).
unsigned char to_gray8(float v);

/// Binary PGM (P5, maxval 255).
std::vector<unsigned char> encode_pgm(int width, int height, std::span<const unsigned char> pixels);
/// Tiles a [B, H, W] batch into a grid of ceil(sqrt(B)) columns and writes a PGM.
void write_pgm_grid(const std::filesystem::path& path, const Tensor& images);

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> pixels;
};
GrayImage decode_pgm(std::span<const unsigned char> bytes);

}  // namespace lcdlab
