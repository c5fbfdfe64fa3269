#ifndef LEAKLAB_RNG_HPP
#define LEAKLAB_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace leaklab {

// Splittable counter-based generator. Each draw is a stateless hash of
// (key, counter), so streams with equal keys are bit-identical regardless of
// platform; splitting derives an independent key instead of sharing state.
class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x5851f42d4c957f2dULL)) {}

    // Child stream; deterministic function of (parent key, stream id).
    Rng split(uint64_t stream) const {
        Rng child;
        child.key_ = mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ULL));
        return child;
    }

    Rng split(std::string_view name) const { return split(fnv1a(name)); }

    uint64_t next_u64() { return mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // 128-bit multiply avoids modulo bias well below 2^64 draws.
        unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * n;
        return static_cast<uint64_t>(wide >> 64);
    }

    // Standard normal via Box-Muller (second variate discarded).
    double normal() {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

} // namespace leaklab

#endif
