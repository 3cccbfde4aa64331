#pragma once

#include <cmath>
#include <cstdint>

namespace mnad {

/// Deterministic 64-bit counter-based generator (SplitMix64).
///
/// Every source of randomness in the project goes through this class so that
/// runs are bit-reproducible across platforms. The state is a single u64,
/// which keeps checkpointing trivial. Sub-streams (per clip, per module) are
/// derived with mix() instead of sharing one sequence.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    /// rk in [0, n); n must be > 0.
    uint64_t next_below(uint64_t n) {
        // Modulo bias is irrelevant at our n (dataset shuffles, item picks).
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    double normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0)
            u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    /// Derive an independent stream seed from (seed, stream id).
    static uint64_t mix(uint64_t seed, uint64_t stream) {
        SplitMix64 g(seed ^ (0x632BE59BD9B4E019ULL * (stream + 1)));
        return g.next_u64();
    }

private:
    uint64_t state_;
};

} // namespace mnad
