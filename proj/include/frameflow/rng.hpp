#pragma once

// Counter-based pseudo-random streams. A stream is derived purely from a list of
// integer keys (seed, epoch, batch, sample, ...), so any draw can be reproduced
// without replaying a global generator state. This is what makes batch losses
// and training runs independent of execution order and thread count.

#include <cstdint>
#include <initializer_list>

#include "common.hpp"

namespace frameflow {

// splitmix64 finalizer: the standard 64-bit avalanche mix.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(mix64(seed)) {}

    // Fold a key list into a stream: stream(a,b,c) != stream(a,c,b).
    static Rng stream(std::initializer_list<uint64_t> keys) {
        uint64_t s = 0x853c49e6748fea9bull;
        for (uint64_t k : keys) s = mix64(s ^ mix64(k));
        Rng r(0);
        r.state_ = s;
        return r;
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range, via rejection-free scaling (ranges here are tiny).
    int uniform_int(int lo, int hi) {
        require(hi >= lo, "uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Standard normal via Box-Muller; the sine-branch partner is cached.
    double gaussian() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        // Guard u1 away from 0 so log() stays finite.
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // ±1 with equal probability.
    double rademacher() { return (next_u64() & 1ull) ? 1.0 : -1.0; }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace frameflow
