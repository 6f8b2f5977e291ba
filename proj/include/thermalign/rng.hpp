#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace thermalign {

// Deterministic RNG used everywhere. The engine is mt19937_64, but all
// distributions are implemented here: the std distribution objects produce
// implementation-defined sequences, which would break cross-toolchain
// reproducibility of corpora and training runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  // [0,1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // [a,b)
  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Box-Muller; consumes two uniforms per fresh pair.
  double normal(double mean, double stddev);

  // Uniform integer in [lo,hi], inclusive. Rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Fisher-Yates from the back, driven by uniform_int.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace thermalign
