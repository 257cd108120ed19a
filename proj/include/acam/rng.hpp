#pragma once

#include <cstdint>
#include <cmath>

namespace acam {

// Portable deterministic RNG. SplitMix64 over a 64-bit counter: every draw
// is a pure function of (seed, counter), so streams are reproducible
// bit-for-bit across platforms and independent of call-site ordering tricks.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny relative to 2^64 so the bias is far below any tolerance.
    std::uint64_t next_below(std::uint64_t n) {
        return next_u64() % n;
    }

    // Standard normal via Box-Muller (always consumes two draws).
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    // Fisher-Yates shuffle.
    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

// Derives a sub-seed for a named module from a root seed. Mixes the stream
// tag through SplitMix so sibling streams are decorrelated.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    SplitMix64 mix(root ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL));
    return mix.next_u64();
}

} // namespace acam
