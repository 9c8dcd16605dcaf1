#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace hikfs {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named random stream ("data", "init",
/// "episodes", "kmeans", ...) from the run's master seed. std::seed_seq is
/// fully specified by the standard, so derived seeds are portable.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                                 std::uint64_t index = 0) {
  std::uint64_t name_hash = 14695981039346656037ull;  // FNV-1a offset basis
  for (char c : stream) {
    name_hash ^= static_cast<unsigned char>(c);
    name_hash *= 1099511628211ull;
  }
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(master), hi(master), lo(name_hash), hi(name_hash), lo(index), hi(index)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline Rng make_rng(std::uint64_t master, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

/// Uniform index in [0, n). Uses the standard distribution so the draw
/// sequence is fixed for a given standard library.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(rng);
}

/// Shuffles the first `count` positions of `values` with a partial
/// Fisher-Yates pass; the prefix is a uniform draw without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& values, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count && i + 1 < values.size(); ++i) {
    std::size_t j = i + uniform_index(rng, values.size() - i);
    std::swap(values[i], values[j]);
  }
}

}  // namespace hikfs
