#pragma once

#include <cstdint>
#include <string_view>

namespace dkd {

// SplitMix64 (Steele, Lea, Flood 2014). State advances by 0x9E3779B97F4A7C15;
// output is the standard xor-shift-multiply finalizer. Chosen because the
// whole generator fits in a few lines and is easy to match bit for bit in any
// language.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  // Top 53 bits scaled into [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller on two uniforms; the second variate is discarded so that each
  // call consumes exactly two draws.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

  // Independent child stream keyed by `tag`, leaving this stream untouched.
  Rng derive(std::uint64_t tag) const;

 private:
  std::uint64_t state_;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

// FNV-1a 64-bit over the bytes of `s`.
std::uint64_t fnv1a64(std::string_view s);

}  // namespace dkd
