#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>

namespace fencepipe {

/// Seeded random stream with platform-independent distributions.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The std::*_distribution templates are not, so uniform, normal
/// and integer draws are derived here directly from raw engine output. This
/// keeps every seeded artifact byte-identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = engine_();
        while (r >= limit) {
            r = engine_();
        }
        return r % n;
    }

    /// Uniform integer in [lo, hi] inclusive.
    int range(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (the second variate is discarded so the
    /// stream position depends only on the number of calls).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Derive an independent child seed (splitmix64 finalizer of seed ^ salt).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) {
        std::uint64_t z = seed ^ (salt + 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1),
                           first + static_cast<std::ptrdiff_t>(j));
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace fencepipe
