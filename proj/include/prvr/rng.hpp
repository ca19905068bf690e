#pragma once

/**
 * @file rng.hpp
 * @brief xoshiro256** generator used everywhere randomness is needed.
 *
 * Fixed in the repo so that datasets, parameter init, and batch sampling are
 * reproducible bit-for-bit from a seed, independent of the standard
 * library's distribution implementations.
 */

#include <cstdint>
#include <vector>

namespace prvr {

class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    /// Uniform in [0, 1), 53-bit resolution.
    double next_double();
    /// Standard normal via the Marsaglia polar method.
    double next_gaussian();
    /// Uniform integer in [0, n).
    uint64_t next_below(uint64_t n);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Stable stream derivation: mixes a label into the seed so independent
    /// substreams (videos vs queries, per-step sampling) never collide.
    static uint64_t mix(uint64_t seed, uint64_t label);

private:
    uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace prvr
