#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace msiam {

/// Seeded random stream. Draws are built from raw 64-bit engine output so
/// sequences are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal (Box-Muller, no caching).
  double normal();

 private:
  std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a master seed, a purpose tag and
/// up to two indices (step, item). Pure function of its arguments.
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                          std::uint64_t a = 0, std::uint64_t b = 0);

} // namespace msiam
