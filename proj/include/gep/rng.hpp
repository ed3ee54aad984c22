#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace gep {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic RNG used for every stochastic decision in the project.
/// All draws go through the helpers below instead of std:: distributions,
/// whose output is not pinned by the standard.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}

    /// Independent stream derived from a base seed and a salt.
    static Rng derived(std::uint64_t seed, std::uint64_t salt) {
        return Rng(splitmix64(seed ^ splitmix64(salt ^ 0x6a09e667f3bcc909ULL)));
    }

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, n). n must be > 0.
    std::size_t uniform_index(std::size_t n) {
        const std::uint64_t range = n;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<std::size_t>(x % range);
    }

    /// Uniform in [lo, hi], both inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(uniform_index(static_cast<std::size_t>(hi - lo + 1)));
    }

    /// Uniform in [0, 1).
    double uniform_double() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform_double(double lo, double hi) { return lo + (hi - lo) * uniform_double(); }

    float uniform_float(float lo, float hi) { return static_cast<float>(uniform_double(lo, hi)); }

    bool bernoulli(double p) { return uniform_double() < p; }

    /// Standard normal via Marsaglia polar method.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform_double() - 1.0;
            v = 2.0 * uniform_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    float normal_float(float mean, float stddev) {
        return mean + stddev * static_cast<float>(normal());
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace gep
