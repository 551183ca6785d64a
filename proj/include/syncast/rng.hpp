#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace syncast {

// Thin wrapper over mt19937_64. The real-valued draws are computed here
// rather than through <random> distributions, whose outputs are
// implementation-defined; generated files must be byte-identical across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Seeds from several words (run seed, epoch, step, ...) via seed_seq,
    // whose mixing algorithm is fixed by the standard.
    Rng(std::initializer_list<std::uint64_t> words) {
        std::vector<std::uint32_t> parts;
        parts.reserve(words.size() * 2);
        for (auto w : words) {
            parts.push_back(static_cast<std::uint32_t>(w & 0xffffffffu));
            parts.push_back(static_cast<std::uint32_t>(w >> 32));
        }
        std::seed_seq seq(parts.begin(), parts.end());
        engine_.seed(seq);
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection keeps the draw unbiased.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Pareto(x_m = 1, alpha) by inversion.
    double pareto(double alpha) {
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return std::pow(u, -1.0 / alpha);
    }

    /// Poisson draw by Knuth's product method; fine for the small means used here.
    int poisson(double mean) {
        if (mean <= 0.0) return 0;
        const double limit = std::exp(-mean);
        double p = 1.0;
        int k = 0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace syncast
