#pragma once

#include <cmath>
#include <cstdint>

namespace dpnet {

// Deterministic splitmix64 generator. All randomness in the project goes
// through this class so that results are reproducible across platforms and
// standard-library implementations (std::shuffle / std::normal_distribution
// are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Independent stream derived from (seed, salt); forking does not disturb
    // the parent. Used for per-sample / per-index streams.
    static Rng keyed(std::uint64_t seed, std::uint64_t salt) {
        Rng r(seed);
        std::uint64_t a = r.next_u64();
        Rng s(a ^ (salt * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
        s.next_u64();
        return s;
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, bound), bound >= 1. Rejection sampling keeps the
    // draw unbiased.
    std::uint64_t uniform_int(std::uint64_t bound) {
        if (bound <= 1) return 0;
        std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound) - 1;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x > limit);
        return x % bound;
    }

    // Standard normal via Box-Muller (no cached spare; two uniforms per draw).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = uniform_int(i);
            auto tmp = first[i - 1];
            first[i - 1] = first[j];
            first[j] = tmp;
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace dpnet
