#pragma once

#include <chrono>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pcda {

using u64 = std::uint64_t;

/// Thrown for malformed arguments, bad configs, missing prerequisites.
/// The CLI maps it to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a training stage hits a non-finite loss and aborts.
/// The CLI maps it to exit code 2.
class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline u64 splitmix64(u64 x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline u64 fnv1a64(std::string_view s) {
  u64 h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent stream seed from a base seed and a tag.
inline u64 derive_seed(u64 seed, std::string_view tag) {
  return splitmix64(seed ^ fnv1a64(tag));
}

inline u64 derive_seed(u64 seed, std::string_view tag, u64 index) {
  return splitmix64(derive_seed(seed, tag) ^ splitmix64(index + 0x51ed2701));
}

std::string hex_digest(u64 value);

/// Deterministic RNG used everywhere. Distributions are implemented here
/// rather than via std::*_distribution so sequences do not depend on the
/// standard library in use.
class Rng {
 public:
  explicit Rng(u64 seed) : engine_(seed) {}

  u64 next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, unbiased.
  u64 below(u64 n) {
    if (n == 0) throw ValidationError("Rng::below: n must be positive");
    const u64 limit = ~u64{0} - (~u64{0} % n);
    u64 x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller. Draws two uniforms per sample.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    shuffle(p);
    return p;
  }

 private:
  std::mt19937_64 engine_;
};

class Timer {
 public:
  Timer() : start_(clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(clock::now() - start_).count();
  }

 private:
  using clock = std::chrono::steady_clock;
  clock::time_point start_;
};

}  // namespace pcda
