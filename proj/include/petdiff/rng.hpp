#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace petdiff {

// Deterministic random source. mt19937_64 engine with hand-rolled variate
// transforms so every draw consumes a pinned number of engine steps:
//   uniform()      1 step
//   uniform_int()  1 step
//   normal()       2 steps (Box-Muller, no cached second value)
//   poisson()      data-dependent steps (dataset generation only)
// The absence of hidden distribution state is what makes the serialized
// engine state a complete snapshot (training resume restores the exact
// future draw sequence).
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    // Uniform double in [0, 1).
    double uniform();

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi);

    // Uniform integer in [0, n). n must be positive.
    int64_t uniform_int(int64_t n);

    // Standard normal draw, Box-Muller.
    double normal();

    // Poisson draw with the given mean. Knuth product method below mean 10,
    // Hoermann's PTRS transformed rejection above.
    int64_t poisson(double mean);

    // Engine state as decimal text (std::mt19937_64 stream format).
    std::string state() const;
    void set_state(const std::string& s);

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
};

}  // namespace petdiff
