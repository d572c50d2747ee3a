#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lcdlab/tensor.hpp"

namespace lcdlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (all integers little-endian):
///
///   "PXDL" | u32 version | u64 header_len | header JSON | payload | u32 crc32(payload)
///
/// The header is a JSON array of {"name", "shape", "offset"} in save order;
/// offsets are byte offsets into the payload, which is the concatenation of
/// the tensors as float32. No timestamps: identical inputs encode to
/// identical bytes.
std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies values by name into `dst`. Throws FormatError listing missing,
/// unexpected or shape-mismatched names when the sets differ.
void assign_parameters(const std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src);

/// Subset of `tensors` whose names start with `prefix`, with the prefix removed.
std::vector<NamedTensor> strip_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix);
std::vector<NamedTensor> add_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix);

}  // namespace lcdlab
