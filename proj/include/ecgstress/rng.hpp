#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace ecgstress {

// Counter-based generator: draw i is splitmix64(seed, i), so a stream is
// fully determined by (seed, counter) and reproducible on any platform.
// Distributions are implemented here rather than taken from <random>, whose
// output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    static std::uint64_t mix(std::uint64_t z) noexcept {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() noexcept {
        return mix(mix(seed_) ^ (0xd1b54a32d192ed03ULL * ++counter_));
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return r % n;
    }

    // Box-Muller; one draw per call, the sine branch is discarded.
    double normal(double mean = 0.0, double stddev = 1.0) noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    // Independent child stream; the parent's counter is not advanced.
    Rng derive(std::uint64_t stream) const noexcept {
        return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ULL)));
    }

    template <typename T>
    void shuffle(std::span<T> items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

} // namespace ecgstress
