#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace micro {

// SplitMix64: used for seed expansion and for deriving independent child
// streams from (master seed, cell key) pairs. Child derivation by hashing
// rather than by sequential draws is what keeps parallel sweeps identical
// for any --jobs value and execution order.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic generator used everywhere. std::mt19937_64 engine output is
// fully specified by the standard; the std::*_distribution adaptors are not,
// so all distribution transforms are implemented explicitly below.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

    uint64_t u64() { return gen_(); }

    // Uniform in [0, 1) from the top 53 bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    uint64_t randint(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = gen_();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (explicit uniforms, portable given the
    // engine; one spare cached per instance).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates (std::shuffle is implementation-defined).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(randint(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream for a keyed sweep cell.
    Rng child(uint64_t key) const { return Rng(derive(seed_, key)); }

    static uint64_t derive(uint64_t master, uint64_t key) {
        return splitmix64(splitmix64(master) ^ splitmix64(key));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_ = 0;
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace micro
