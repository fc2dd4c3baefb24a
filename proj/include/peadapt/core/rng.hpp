#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

namespace peadapt {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Folds several stream identifiers into one seed.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (auto p : parts) {
        h = splitmix64(h ^ splitmix64(p));
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    /// Uniform integer in [lo, hi].
    long integer(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(engine_); }
    bool bernoulli(double p) { return uniform() < p; }

    /// Beta(a, b) through the ratio of two Gamma variates.
    double beta(double a, double b) {
        const double x = std::gamma_distribution<double>(a, 1.0)(engine_);
        const double y = std::gamma_distribution<double>(b, 1.0)(engine_);
        if (x + y == 0.0) {
            return 0.5;
        }
        return x / (x + y);
    }

    /// Fisher-Yates with our own draws; std::shuffle is implementation-defined.
    std::vector<long> permutation(long n) {
        std::vector<long> p(static_cast<std::size_t>(n));
        std::iota(p.begin(), p.end(), 0L);
        for (long i = n - 1; i > 0; --i) {
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(integer(0, i))]);
        }
        return p;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace peadapt
