#ifndef APT_CORE_RNG_HPP
#define APT_CORE_RNG_HPP

#include <cstdint>
#include <cstddef>
#include <vector>

namespace apt {

// SplitMix64 generator. Small, fast and fully portable: the same seed yields
// the same stream on every platform, which the reproducibility contract
// depends on (std:: distributions are implementation defined and are not used
// anywhere in this project).
//
// Substreams are derived by hashing tags into the base seed, so e.g. the
// generator for (class c, sample i) is independent of how many other samples
// were drawn before it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(mix(seed)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; pairs are cached.
  double normal();

  // Uniform integer in [0, n). Modulo bias is irrelevant at our range sizes.
  std::size_t uniform_int(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Uniform integer in [lo, hi], inclusive.
  long uniform_range(long lo, long hi) {
    return lo + static_cast<long>(uniform_int(static_cast<std::size_t>(hi - lo + 1)));
  }

  // Independent substream for (tag_a, tag_b). Derived from the construction
  // seed, not the evolving state, so call order does not matter.
  Rng substream(std::uint64_t tag_a, std::uint64_t tag_b = 0) const {
    std::uint64_t s = mix(seed_ ^ mix(tag_a + 0x9e3779b97f4a7c15ULL));
    s = mix(s ^ mix(tag_b + 0x2545f4914f6cdd1dULL));
    return Rng(s);
  }

  // Deterministic Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace apt

#endif  // APT_CORE_RNG_HPP
