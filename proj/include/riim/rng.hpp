#pragma once

// Counter-based random streams. Every draw is a pure function of
// (key, counter), so a replication's data depend only on its key and never on
// which worker produced it or in what order.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>

#include "riim/numeric.hpp"

namespace riim {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derive a stream key from a seed and an ordered list of tags
// (replication index, attempt, stage, ...).
inline constexpr std::uint64_t stream_key(std::uint64_t seed,
                                          std::initializer_list<std::uint64_t> tags) {
  std::uint64_t k = splitmix64(seed ^ 0x5851f42d4c957f2dULL);
  for (std::uint64_t t : tags) k = splitmix64(k ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return k;
}

class CounterStream {
 public:
  using result_type = std::uint64_t;

  explicit CounterStream(std::uint64_t key) : key_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(key_ ^ splitmix64(counter_++)); }

  // Uniform on the open interval (0, 1): 53 random bits, offset by half a step.
  double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  // Inversion keeps the normal stream platform-independent (no
  // implementation-defined std::normal_distribution).
  double normal() { return normal_quantile(uniform()); }

  double laplace(double location, double scale) {
    const double u = uniform() - 0.5;
    return location - scale * std::copysign(std::log1p(-2.0 * std::abs(u)), u);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace riim
