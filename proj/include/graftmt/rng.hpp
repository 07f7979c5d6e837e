// Deterministic random number helpers.
//
// Two flavours are provided: a counter-based hash (stateless, used for dropout
// masks so any mask can be replayed from its key) and a small sequential
// generator wrapper used by initialisation and data generation.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace graftmt {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(a ^ splitmix64(b));
}

// Uniform double in [0, 1) keyed by (seed, stream, node, index).
inline double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t node,
                              std::uint64_t index) noexcept {
  const std::uint64_t h =
      hash_combine(hash_combine(hash_combine(seed, stream), node), index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Sequential generator. std::mt19937_64 output is fixed by the standard, but the
// std distributions are not, so sampling helpers are implemented here directly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(engine_() % span);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Knuth's method; fine for the small means used by span masking.
  int poisson(double lambda) {
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = uniform();
    while (p > limit) {
      ++k;
      p *= uniform();
    }
    return k;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      const auto j = static_cast<decltype(i)>(uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace graftmt
