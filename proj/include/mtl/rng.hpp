#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace mtl {

// Counter-based deterministic generator built on SplitMix64. Streams are
// derived by hashing (seed, stream id) pairs, so every consumer of
// randomness (init, batch order, per-example data, PCGrad shuffles) owns an
// independent stream addressable by name or index. Identical seeds produce
// identical sequences on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) { reset(mix(seed ^ kGolden)); }

  // Independent child stream. Deriving is order-free: the child depends only
  // on (parent seed, id), not on how much the parent has been consumed.
  [[nodiscard]] Rng derive(std::uint64_t id) const {
    Rng child(0);
    child.reset(mix(origin_ + kGolden * (id + 1)));
    return child;
  }

  [[nodiscard]] Rng derive(std::string_view name) const {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return derive(h);
  }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; the pair partner is cached so consecutive calls alternate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[next_below(i)]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

  void reset(std::uint64_t raw) {
    state_ = raw;
    origin_ = raw;
    has_spare_ = false;
  }

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_ = 0;
  std::uint64_t origin_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mtl
