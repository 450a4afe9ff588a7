#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "spotter/common.hpp"

namespace spotter {

// Stable 64-bit mix of a seed and an index (per-item dataset seeds, derived
// streams).
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * (index + 1));
  x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27; x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

// Deterministic random source. All stochastic behaviour in the library goes
// through this wrapper so runs are reproducible from a single seed.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

  // Inclusive integer range.
  int64_t randint(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(engine_() % span);
  }

  // Box-Muller; avoids std::normal_distribution so the stream layout is
  // pinned by this file rather than the standard library.
  double gaussian(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return mean + stddev * r * std::cos(a);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = randint(0, i);
      std::swap(first[i], first[j]);
    }
  }

  // Independent child stream; decouples e.g. dataset synthesis from weight
  // initialisation so one can be replayed without the other.
  Rng derive(uint64_t salt) const { return Rng(mix_seed(seed_, salt)); }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << (have_spare_ ? 1 : 0) << ' ' << spare_ << ' ' << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    int spare_flag = 0;
    is >> seed_ >> spare_flag >> spare_ >> engine_;
    have_spare_ = spare_flag != 0;
    if (!is) throw ContractError("Rng::deserialize: malformed state string");
  }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace spotter
