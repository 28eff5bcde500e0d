#pragma once

// Counter-based random number generation. Every consumer gets its own named
// substream derived from a single root seed, so results do not depend on the
// order in which independent components draw numbers (or on which thread runs
// them). Streams are cheap value types: copying one forks the counter.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace hattn {

namespace detail {

// SplitMix64 finalizer. Full-avalanche mixing of a 64-bit word.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

// One substream: a keyed counter. next_u64() is a pure function of
// (key, counter), so a stream can be replayed by reconstructing it.
class Rng {
 public:
  Rng() : key_(0) {}
  explicit Rng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Modulo bias is < 2^-40 for any n that fits desk-scale use.
    return next_u64() % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; second value is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Root generator: hands out named substreams. stream("init") always yields the
// same sequence for a given seed no matter what else was drawn before.
class RngPool {
 public:
  explicit RngPool(std::uint64_t seed) : seed_key_(detail::mix64(seed ^ 0x5851f42d4c957f2dull)) {}

  Rng stream(std::string_view name) const {
    return Rng(detail::mix64(seed_key_ ^ detail::fnv1a(name)));
  }

  // Indexed substream, e.g. one per image or per epoch.
  Rng stream(std::string_view name, std::uint64_t index) const {
    return Rng(detail::mix64(detail::mix64(seed_key_ ^ detail::fnv1a(name)) + index));
  }

  std::uint64_t seed_key() const { return seed_key_; }

 private:
  std::uint64_t seed_key_;
};

}  // namespace hattn
