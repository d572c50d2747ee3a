#include "lcdlab/checkpoint.hpp"

#include <map>
#include <nlohmann/json.hpp>

#include "lcdlab/error.hpp"
#include "lcdlab/io.hpp"

namespace lcdlab {

namespace {

constexpr unsigned char kMagic[4] = {'P', 'X', 'D', 'L'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
}

std::uint64_t get_le(std::span<const unsigned char> bytes, std::size_t offset, int width) {
  if (offset + static_cast<std::size_t>(width) > bytes.size()) throw FormatError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(bytes[offset + static_cast<std::size_t>(b)]) << (8 * b);
  return v;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  nlohmann::ordered_json header = nlohmann::ordered_json::array();
  std::vector<unsigned char> payload;
  for (const auto& nt : tensors) {
    header.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", payload.size()}});
    append_f32_le(payload, nt.tensor.data());
  }
  const std::string h = header.dump();
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, h.size());
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc32(payload));
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw FormatError("checkpoint: bad magic (expected PXDL)");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto header_len = get_le(bytes, 8, 8);
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint: truncated header");
  const std::size_t payload_start = 16 + static_cast<std::size_t>(header_len);
  if (bytes.size() < payload_start + 4) throw FormatError("checkpoint: truncated payload");
  const auto payload = bytes.subspan(payload_start, bytes.size() - payload_start - 4);
  const auto stored_crc = static_cast<std::uint32_t>(get_le(bytes, bytes.size() - 4, 4));
  if (crc32(payload) != stored_crc) throw FormatError("checkpoint: CRC mismatch (payload corrupted)");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.is_array()) throw FormatError("checkpoint: header must be a JSON array");
  std::vector<NamedTensor> out;
  for (const auto& entry : header) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto nbytes = static_cast<std::size_t>(shape_numel(shape)) * 4;
    if (offset + nbytes > payload.size()) throw FormatError("checkpoint: tensor extends past payload");
    out.push_back({entry.at("name").get<std::string>(),
                   Tensor::from_data(shape, decode_f32_le(payload.subspan(offset, nbytes)))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  // Write-then-rename keeps the previous checkpoint intact on failure.
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, encode_checkpoint(tensors));
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void assign_parameters(const std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : src) by_name[s.name] = &s.tensor;
  std::string missing, mismatched, unexpected;
  std::map<std::string, bool> used;
  for (const auto& d : dst) {
    auto it = by_name.find(d.name);
    if (it == by_name.end()) {
      missing += " " + d.name;
    } else if (it->second->shape() != d.tensor.shape()) {
      mismatched += " " + d.name + shape_str(it->second->shape()) + "!=" + shape_str(d.tensor.shape());
    }
    used[d.name] = true;
  }
  for (const auto& s : src)
    if (!used.count(s.name)) unexpected += " " + s.name;
  if (!missing.empty() || !mismatched.empty() || !unexpected.empty())
    throw FormatError("checkpoint: parameter sets differ; missing:" + (missing.empty() ? " none" : missing) +
                      "; unexpected:" + (unexpected.empty() ? " none" : unexpected) +
                      "; shape mismatch:" + (mismatched.empty() ? " none" : mismatched));
  for (auto d : dst) {
    auto values = by_name.at(d.name)->data();
    auto out = d.tensor.mutable_data();
    std::copy(values.begin(), values.end(), out.begin());
  }
}

std::vector<NamedTensor> strip_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors)
    if (t.name.rfind(prefix, 0) == 0) out.push_back({t.name.substr(prefix.size()), t.tensor});
  return out;
}

std::vector<NamedTensor> add_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors) out.push_back({prefix + t.name, t.tensor});
  return out;
}

}  // namespace lcdlab
