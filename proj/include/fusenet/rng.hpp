// rng.hpp -- portable, explicitly specified pseudorandom generator.
//
// Every stochastic choice in the library (dropout masks, dataset shuffles,
// parameter initialization, synthetic data) draws from this generator so that
// a seed fully determines a run on every platform.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <utility>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet {

// splitmix64 (Steele, Lea, Flood 2014). Used to spread raw seeds and to
// derive independent sub-streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Derive the seed of an independent sub-stream (e.g. one per epoch).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ (0x9E3779B97F4A7C15ull * (stream + 1)));
}

// xorshift64* (Vigna 2016). State recurrence, applied per draw:
//   x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;  output = x * 2685821657736338717
// The state is never zero: seeds are passed through splitmix64 first and a
// zero result is replaced by a fixed nonzero constant.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        state_ = splitmix64(seed);
        if (state_ == 0) state_ = 0x9E3779B97F4A7C15ull;
    }

    std::uint64_t next_u64() {
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 2685821657736338717ull;
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [0, 1) with 24 random bits.
    float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Unbiased integer in [0, n). Rejection sampling keeps the draw exact and
    // platform-independent.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw UsageError("Rng::next_below: n must be positive");
        const std::uint64_t threshold = (0ull - n) % n; // 2^64 mod n
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (the cosine branch only, one value per
    // two uniform draws; the stream stays position-independent).
    double next_normal() {
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        constexpr double two_pi = 6.28318530717958647692;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Fisher-Yates shuffle, back to front.
    template <typename Seq>
    void shuffle(Seq& seq) {
        if (seq.size() < 2) return;
        for (std::size_t i = seq.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(seq[i], seq[j]);
        }
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

// Identity permutation helper used by shuffles and splits.
inline std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

} // namespace fusenet
