#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "retsyn/common.hpp"

namespace retsyn {

// Deterministic RNG wrapper. All stochastic code in the project draws through
// this type so that runs are reproducible from a single seed. Gaussian draws
// use Box-Muller without caching, keeping the stream state trivial to reason
// about when generators are copied or derived.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1).
    double uniform() {
        return (eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) raise("uniform_int: n must be positive");
        // Rejection sampling to avoid modulo bias.
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return v % n;
    }

    double gaussian() {
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Derive an independent child generator from a string tag. Stable across
    // runs; lets per-image / per-stage streams be split deterministically.
    Rng derive(const std::string& tag) const {
        uint64_t h = fnv1a(tag);
        uint64_t mix = base_seed_ ^ (h + 0x9e3779b97f4a7c15ull + (base_seed_ << 6) + (base_seed_ >> 2));
        Rng child(mix);
        child.base_seed_ = mix;
        return child;
    }

    Rng derive(const std::string& tag, uint64_t index) const {
        return derive(tag + "#" + std::to_string(index));
    }

    static Rng seeded(uint64_t seed) {
        Rng r(seed);
        r.base_seed_ = seed;
        return r;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    uint64_t base_seed_ = 0;
};

}  // namespace retsyn
