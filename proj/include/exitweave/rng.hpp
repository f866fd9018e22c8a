#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace exitweave {

// xoshiro256** (Blackman & Vigna) seeded through splitmix64. All derived
// quantities (uniform doubles, normals, bounded integers) are computed here
// rather than through <random> distributions, whose output is
// implementation-defined. Same seed, same sequence, on every platform.
class RngStream {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256**/splitmix64";

  explicit RngStream(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  // Independent stream for one purpose ("init", "shuffle", ...). Derived from
  // this stream's seed only, so it does not consume draws from the parent.
  RngStream child(std::string_view label) const;
  RngStream child(std::string_view label, std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal, Box-Muller
  std::uint64_t below(std::uint64_t n);  // uniform in [0, n), unbiased

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace exitweave
