#pragma once

// Counter-based splittable PRNG.
//
// Output n (n = 1, 2, ...) of a stream with key k is
//     mix64(k + n * 0x9E3779B97F4A7C15)
// where mix64 is the SplitMix64 finalizer:
//     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//     z =  z ^ (z >> 31)
// A substream with id s of a stream keyed k is keyed mix64(k ^ mix64(s + 0x9E3779B97F4A7C15)).
// uniform() = (next >> 11) * 2^-53; normal() is Box-Muller on
// (1 - uniform(), uniform()) taking the cosine branch only; uniform_int(n) is
// the high 64 bits of next * n. These definitions are enough to reproduce every
// stream in another language.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace cmcl {

std::uint64_t mix64(std::uint64_t z);

/// Stable 64-bit FNV-1a hash, used to derive named substreams.
std::uint64_t hash_name(std::string_view name);

class Rng {
 public:
  explicit Rng(std::uint64_t key = 0) : key_(key) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);

  /// Independent stream derived from this stream's key; does not advance this stream.
  Rng substream(std::uint64_t id) const;
  Rng substream(std::string_view name) const { return substream(hash_name(name)); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cmcl
