#include "lcdlab/rng.hpp"

#include <cmath>
#include <numbers>

namespace lcdlab {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) : key_(splitmix64(seed)) {}

std::uint64_t Rng::next_u64() { return splitmix64(key_ + (counter_++) * kGolden); }

float Rng::uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24F; }

double Rng::uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

int Rng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo + 1);
  // Lemire-style multiply-shift; bias is < span / 2^64 and irrelevant here.
  const auto r = static_cast<unsigned __int128>(next_u64()) * span;
  return lo + static_cast<int>(static_cast<std::uint64_t>(r >> 64));
}

float Rng::normal() {
  double u1 = uniform_double();
  while (u1 <= 0.0) u1 = uniform_double();
  const double u2 = uniform_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  return static_cast<float>(r * std::cos(theta));
}

Rng Rng::split(std::string_view name) const { return Rng(splitmix64(key_ ^ fnv1a64(name)), 0); }

Rng Rng::fork(std::uint64_t index) const {
  return Rng(splitmix64(key_ ^ splitmix64(index * kGolden + 0x632BE59BD9B4E019ULL)), 0);
}

}  // namespace lcdlab
