#pragma once

// Seeded, platform-independent random number generation.
//
// Generator: xoshiro256++ (Blackman & Vigna), seeded through splitmix64.
// The integer and uniform streams are bit-identical on every platform for a
// given seed. Gaussian variates use the Box-Muller transform; they are
// bit-identical across reruns on the same platform/libm.
//
// Parallel or logically-separate consumers must not share one RngState.
// Split independent streams with derive_seed(seed, tag) / RngState::derive.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

namespace lsg {

inline std::uint64_t splitmix64_next(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Stable stream derivation: seed + tag -> new seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t x = seed ^ (0xA0761D6478BD642FULL * (tag + 1));
    std::uint64_t a = splitmix64_next(x);
    std::uint64_t b = splitmix64_next(x);
    return a ^ (b >> 17);
}

class RngState {
public:
    explicit RngState(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64_next(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0, 1), 53-bit resolution.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // N(0, stddev^2). Box-Muller; the second variate of each pair is cached.
    double next_gaussian(double stddev) {
        if (stddev < 0.0) throw std::invalid_argument("rng: negative stddev");
        if (has_spare_) {
            has_spare_ = false;
            return spare_ * stddev;
        }
        const double u1 = 1.0 - next_unit();  // (0, 1]: keeps log() finite
        const double u2 = next_unit();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle) * stddev;
    }

    // Independent stream; does not disturb this generator.
    RngState derive(std::uint64_t tag) const {
        return RngState(derive_seed(state_[0] ^ state_[2], tag));
    }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace lsg
