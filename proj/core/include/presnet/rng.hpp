#pragma once

#include <cstdint>

namespace presnet {

// Counter-based generator (SplitMix64 applied to seed + counter). The whole
// state is two u64 values, so it serializes exactly and every draw is a pure
// function of (seed, counter) independent of platform or stdlib.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t next_u64();

    // Uniform on [0, 1).
    double uniform();
    // Uniform on (0, 1]; used where log(0) must be impossible.
    double uniform_open();
    // Standard normal via Box-Muller (one draw per two uniforms, no cache).
    double normal();
    // Unbiased integer in [0, n), n >= 1, by rejection.
    std::uint64_t uniform_int(std::uint64_t n);
    // True with probability 1/2.
    bool coin() { return (next_u64() >> 63) != 0; }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    void restore(std::uint64_t seed, std::uint64_t counter) {
        seed_ = seed;
        counter_ = counter;
    }

    // Independent stream derived from this one (e.g. per-worker rngs).
    Rng fork(std::uint64_t stream) const;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace presnet
