#pragma once

#include <cstdint>
#include <cmath>

namespace lpcr {

// Splittable counter-based generator. The whole toolkit derives every random
// stream from one root seed through this type, so a run is reproducible from
// its config alone.
//
// Algorithm (fixed, independent of any library):
//   mix(z)  = splitmix64 finalizer:
//             z += 0x9E3779B97F4A7C15
//             z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//             return z ^ (z >> 31)
//   output_i = mix(key + i * 0x9E3779B97F4A7C15), i = 1, 2, ...
//   split(s) = Rng with key' = mix(key ^ mix(s + 0x517CC1B727220A95)), i' = 0
class Rng {
 public:
  Rng() : key_(0), counter_(0) {}
  explicit Rng(std::uint64_t seed) : key_(mix(seed)), counter_(0) {}

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Independent child stream; does not advance this stream.
  Rng split(std::uint64_t stream) const {
    Rng child;
    child.key_ = mix(key_ ^ mix(stream + 0x517CC1B727220A95ULL));
    child.counter_ = 0;
    return child;
  }
  Rng split2(std::uint64_t a, std::uint64_t b) const { return split(a).split(b); }

  // Uniform in [0,1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n) {
    // Multiply-shift; bias is < 2^-64 * n, irrelevant at our scales.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (consumes two uniforms).
  double next_normal() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool next_bool(double p_true) { return next_unit() < p_true; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

// Fisher-Yates over [0, n) index vectors.
template <typename Vec>
void shuffle_indices(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    auto tmp = v[i - 1];
    v[i - 1] = v[j];
    v[j] = tmp;
  }
}

}  // namespace lpcr
