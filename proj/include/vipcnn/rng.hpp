#pragma once

// Seeded random source with distribution code spelled out here so draws are
// identical across standard-library implementations.

#include <cmath>
#include <cstdint>
#include <random>

namespace vipcnn {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    // Independent stream derived from a parent seed and a tag.
    static Rng derive(std::uint64_t seed, std::uint64_t tag)
    {
        std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

    std::uint64_t next() { return eng_(); }

    // [0, 1)
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::uint64_t below(std::uint64_t n)
    {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do x = eng_();
        while (x >= limit);
        return x % n;
    }

    // [lo, hi]
    long range(long lo, long hi) { return lo + long(below(std::uint64_t(hi - lo + 1))); }

    double normal(double mean = 0.0, double stddev = 1.0)
    {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    template <typename It>
    void shuffle(It first, It last)
    {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) std::swap(first[i], first[long(below(std::uint64_t(i + 1)))]);
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0;
    bool has_spare_ = false;
};

} // namespace vipcnn
