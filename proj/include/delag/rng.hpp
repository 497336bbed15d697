#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace delag {

// Seed derivation and sampling utilities. Everything downstream of a
// 64-bit seed must be bit-reproducible across runs and worker counts, so
// substreams are derived by hashing (seed, tags) rather than by sharing a
// single engine, and normal deviates use an explicit Box-Muller transform
// instead of the implementation-defined std::normal_distribution.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Collapse (seed, tag0, tag1, tag2) into an independent substream seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag0,
                                 std::uint64_t tag1 = 0, std::uint64_t tag2 = 0) {
    std::uint64_t s = seed;
    std::uint64_t h = splitmix64(s);
    s ^= tag0 + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(s);
    s ^= tag1 + 0xd1b54a32d192ed03ULL;
    h ^= splitmix64(s);
    s ^= tag2 + 0x8cb92ba72f3d8dd7ULL;
    h ^= splitmix64(s);
    return h;
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (bit-stable across platforms).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling keeps the draw unbiased.
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return v % n;
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
        }
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace delag
