#include "cmcl/rng.hpp"

#include <cmath>
#include <numbers>

namespace cmcl {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

__extension__ typedef unsigned __int128 u128;

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  const u128 wide = static_cast<u128>(next_u64()) * n;
  return static_cast<std::uint64_t>(wide >> 64);
}

Rng Rng::substream(std::uint64_t id) const { return Rng(mix64(key_ ^ mix64(id + kGolden))); }

}  // namespace cmcl
