#pragma once

#include <cstdint>
#include <random>

namespace mmgen {

// Seeded generator shared by every stochastic component. Uniform draws use
// the top 53 bits so sequences do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : engine_() % n; }
  double normal() {
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmgen
