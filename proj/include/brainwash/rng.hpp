#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace brainwash {

// std::mt19937_64 has a standard-mandated output sequence; the conversions
// below are written out so results do not depend on the library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), rejection sampled.
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller.
    double normal();

    template <class Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a path of tags.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

// Identity permutation of [0, n) shuffled with the given seed.
std::vector<int> seeded_permutation(int n, std::uint64_t seed);

}  // namespace brainwash
