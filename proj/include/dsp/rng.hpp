#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace dsp {

// Deterministic RNG. All transforms (uniform, normal, gumbel, shuffle) are
// hand-rolled on top of mt19937_64 so that streams reproduce bit-for-bit
// across standard library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, second value cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Gumbel(0, 1)
    double gumbel() {
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return -std::log(-std::log(u));
    }

    // [0, n)
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
    }

    // Fisher-Yates
    template <class RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            std::swap(first[i], first[below(i + 1)]);
        }
    }

    // Independent substream derived from a master seed and a stream tag, so
    // that e.g. gumbel draws never perturb the shuffle sequence.
    static Rng stream(std::uint64_t master_seed, std::uint64_t tag) {
        return Rng(splitmix(master_seed + 0x9e3779b97f4a7c15ULL * (tag + 1)));
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Fixed stream tags used by trainers; keeping them distinct makes runs with
// and without the group-learning machinery consume identical shuffle/init
// sequences.
namespace rng_stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kGumbel = 3;
inline constexpr std::uint64_t kData = 4;
inline constexpr std::uint64_t kOracle = 5;
} // namespace rng_stream

} // namespace dsp
