#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "trinity/error.hpp"

namespace trinity {

// Serializable snapshot of a RandomSource. All fields are plain integers /
// doubles so checkpoints can round-trip the stream bit-exactly.
struct RandomState {
    std::array<std::uint64_t, 4> s{};
    bool has_spare_gaussian = false;
    double spare_gaussian = 0.0;
};

// Deterministic xoshiro256++ stream with hand-rolled distributions.
// Identical seed + identical call sequence yields identical outputs on every
// platform; std::random distributions are implementation-defined and are
// deliberately not used.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro state
        std::uint64_t x = seed;
        for (auto& word : state_.s) {
            x += 0x9E3779B97F4A7C15ull;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
            word = z ^ (z >> 31);
        }
        state_.has_spare_gaussian = false;
        state_.spare_gaussian = 0.0;
    }

    std::uint64_t next_u64() {
        auto& s = state_.s;
        const std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform double in [0, 1), 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Lemire's unbiased multiply-shift rejection.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ContractError("uniform_int: n must be positive");
        std::uint64_t x = next_u64();
        unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                x = next_u64();
                m = static_cast<unsigned __int128>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller, spare value cached.
    double gaussian() {
        if (state_.has_spare_gaussian) {
            state_.has_spare_gaussian = false;
            return state_.spare_gaussian;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        state_.spare_gaussian = r * std::sin(theta);
        state_.has_spare_gaussian = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Derives an independent stream for a sub-task without disturbing this one.
    RandomSource fork(std::uint64_t tag) const {
        RandomSource child(state_.s[0] ^ (state_.s[2] + 0x9E3779B97F4A7C15ull * (tag + 1)));
        return child;
    }

    const RandomState& state() const { return state_; }
    void restore(const RandomState& st) { state_ = st; }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    RandomState state_;
};

}  // namespace trinity
