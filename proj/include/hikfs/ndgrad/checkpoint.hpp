#pragma once

// Parameter container format:
//   "HIKFS01"                                   7-byte magic
//   repeated record:
//     u32 name_length, name bytes
//     u32 rank, rank x u64 dims
//     prod(dims) x f64 data
//   u32 CRC32 of every byte between the magic and the checksum
// All integers and floats are little-endian.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hikfs/error.hpp"
#include "hikfs/ndgrad/tensor.hpp"

namespace hikfs::nd {

inline constexpr std::string_view kCheckpointMagic = "HIKFS01";

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(std::string_view in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw DataError("checkpoint: truncated record");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::string encode_tensors(std::span<const NamedTensor> tensors) {
  std::string body;
  for (const auto& [name, t] : tensors) {
    detail::put_le(body, name.size(), 4);
    body += name;
    detail::put_le(body, t.rank(), 4);
    for (std::size_t d : t.shape()) detail::put_le(body, d, 8);
    for (double v : t.data()) detail::put_le(body, std::bit_cast<std::uint64_t>(v), 8);
  }
  std::string out(kCheckpointMagic);
  out += body;
  detail::put_le(out, detail::crc32_of(body), 4);
  return out;
}

inline std::vector<NamedTensor> decode_tensors(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 4 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw DataError("checkpoint: missing HIKFS01 magic");
  }
  const std::string_view body = bytes.substr(kCheckpointMagic.size(), bytes.size() - kCheckpointMagic.size() - 4);
  std::size_t crc_pos = bytes.size() - 4;
  const auto stored = static_cast<std::uint32_t>(detail::get_le(bytes, crc_pos, 4));
  if (stored != detail::crc32_of(body)) throw DataError("checkpoint: CRC32 mismatch (file corrupted)");

  std::vector<NamedTensor> out;
  std::size_t pos = 0;
  while (pos < body.size()) {
    const auto name_len = detail::get_le(body, pos, 4);
    if (pos + name_len > body.size()) throw DataError("checkpoint: truncated name");
    std::string name(body.substr(pos, name_len));
    pos += name_len;
    const auto rank = detail::get_le(body, pos, 4);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(detail::get_le(body, pos, 8));
    std::vector<double> data(numel_of(shape));
    for (double& v : data) v = std::bit_cast<double>(detail::get_le(body, pos, 8));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline void save_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  const auto bytes = encode_tensors(tensors);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_tensors(ss.str());
}

/// Finds a tensor by name or throws.
inline const Tensor& find_tensor(std::span<const NamedTensor> tensors, std::string_view name) {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw DataError("checkpoint: no tensor named '" + std::string(name) + "'");
}

}  // namespace hikfs::nd
