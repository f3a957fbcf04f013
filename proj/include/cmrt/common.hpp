#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cmrt {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG. Uniform/normal draws are computed from raw mt19937_64
// output so results are bit-identical across standard libraries.
struct Rng {
    std::mt19937_64 gen;

    explicit Rng(uint64_t seed) : gen(seed) {}

    // uniform on [0,1), 53-bit resolution
    double uniform() { return (gen() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(gen() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Box-Muller, one value per call (second value discarded)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
};

// splitmix64 step, used to fan a global seed out into per-stage and
// per-utterance seeds
inline uint64_t hash_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace cmrt
