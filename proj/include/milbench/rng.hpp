#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace milbench::rng {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t combine(std::uint64_t a) noexcept { return mix64(a + kGolden); }

/// Order-sensitive hash of a sequence of 64-bit words. Used to derive
/// independent seeds such as mix(master, fold, replicate).
template <typename... Rest>
constexpr std::uint64_t combine(std::uint64_t a, std::uint64_t b, Rest... rest) noexcept {
  return combine(mix64(a + kGolden) ^ (b * 0xd6e8feb86659fd93ULL + 0x2545f4914f6cdd1dULL),
                 static_cast<std::uint64_t>(rest)...);
}

/// FNV-1a followed by a SplitMix finalizer.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

/// Counter-based stream: draw i of stream k is mix64(scramble(k) + (i+1)*golden).
/// Two streams with different keys are independent and any draw can be
/// reproduced from (key, counter) alone, so results never depend on how work
/// is scheduled across threads.
class Stream {
 public:
  explicit constexpr Stream(std::uint64_t key, std::uint64_t counter = 0) noexcept
      : base_(mix64(key ^ 0x6a09e667f3bcc909ULL)), counter_(counter) {}

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(base_ + counter_ * kGolden);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Lemire's multiply-shift with rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
      if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  bool coin() noexcept { return (next_u64() >> 63) != 0; }

  /// Standard normal via Box-Muller (both halves used).
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t base_;
  std::uint64_t counter_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates shuffle driven by a Stream.
template <typename T>
void shuffle(std::vector<T>& v, Stream& s) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(s.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

inline std::vector<std::size_t> permutation(std::size_t n, Stream& s) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  shuffle(p, s);
  return p;
}

}  // namespace milbench::rng
