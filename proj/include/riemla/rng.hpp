#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace riemla {

/// Deterministic splitmix64 generator with counter-based stream derivation.
///
/// Every stochastic component of the library (dataset generation, posterior
/// sampling, mini-batch selection) draws from one of these instead of
/// <random>, so sequences are bit-identical across platforms, standard
/// libraries and thread schedules. Streams are derived from a master seed
/// plus up to two indices; distinct (master, a, b) triples give independent
/// sequences.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  static Rng stream(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t h = mix(master ^ 0x6A09E667F3BCC909ull);
    h = mix(h ^ (a * 0xD6E8FEB86659FD93ull + 0x9E3779B97F4A7C15ull));
    h = mix(h ^ (b * 0xA0761D6478BD642Full + 0xE7037ED1A0B428DBull));
    return Rng(h);
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be > 0");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller. The spare value is cached, so a fixed
  /// number of calls consumes a fixed number of raw draws.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double phi = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace riemla
