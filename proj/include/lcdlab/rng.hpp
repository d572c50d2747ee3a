#pragma once

#include <cstdint>
#include <string_view>

namespace lcdlab {

/// Counter-based generator: the n-th draw is splitmix64(key + n * golden).
///
/// A stream is fully described by (key, counter), so it can be checkpointed
/// as two integers and resumed exactly. `split(name)` derives an independent
/// child key by mixing the parent key with the FNV-1a hash of `name`;
/// `fork(index)` does the same for an integer (e.g. a training step).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 24 bits of resolution.
  float uniform();
  double uniform_double();
  /// Uniform integer in [lo, hi] (inclusive).
  int uniform_int(int lo, int hi);
  /// Standard normal via Box-Muller (two uniforms per draw, no cached state).
  float normal();

  Rng split(std::string_view name) const;
  Rng fork(std::uint64_t index) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

}  // namespace lcdlab
