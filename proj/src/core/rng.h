#pragma once

#include <cstdint>
#include <random>

#include "core/tensor.h"

namespace ipc {

uint64_t splitmix64(uint64_t x);

// Deterministic RNG: mt19937_64 is bit-exact across platforms by the
// standard, and the normal transform is our own Box-Muller (libstdc++'s
// normal_distribution is implementation-defined).
struct rng {
    std::mt19937_64 g;
    bool  has_spare = false;
    float spare = 0.0f;

    explicit rng(uint64_t seed) : g(seed) {}

    // uniform in [0,1), 24-bit resolution
    float uniform() {
        return (float) (g() >> 40) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    float normal();

    // integer in [lo, hi)
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + (int64_t) (g() % (uint64_t) (hi - lo));
    }

    void fill_normal(tensor & t, float mean = 0.0f, float stddev = 1.0f) {
        for (float & f : t.v) f = mean + stddev * normal();
    }

    void fill_uniform(tensor & t, float lo, float hi) {
        for (float & f : t.v) f = uniform(lo, hi);
    }

    // Fisher-Yates; std::shuffle is not reproducible across standard libraries
    template <typename T>
    void shuffle(std::vector<T> & items) {
        for (int64_t i = (int64_t) items.size() - 1; i > 0; --i) {
            std::swap(items[(size_t) i], items[(size_t) randint(0, i + 1)]);
        }
    }
};

// derive a child seed from a base seed and an index (sample grids stay stable
// when extended)
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
    return splitmix64(base + 0x9e3779b97f4a7c15ull * (index + 1));
}

} // namespace ipc
