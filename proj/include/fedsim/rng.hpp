#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace fedsim {

// All randomness in the simulator flows through this header.  Every consumer
// derives its own substream from (seed, tags...) so that results never depend
// on scheduling: two clients training in parallel draw from disjoint streams
// that are fully determined by their ids, not by execution order.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Fold an ordered list of tags into a base seed.  Chaining splitmix64 keeps
// distinct tag tuples well separated even when the raw values are tiny
// (client ids, round numbers, purpose constants).
inline std::uint64_t stream_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = splitmix64(base);
    for (std::uint64_t t : tags) s = splitmix64(s ^ (t + 0x9e3779b97f4a7c15ULL));
    return s;
}

// Purpose tags for substream derivation.  Keep the numeric values stable:
// changing them silently changes every experiment.
namespace stream {
inline constexpr std::uint64_t data_gen   = 1;
inline constexpr std::uint64_t partition  = 2;
inline constexpr std::uint64_t poison     = 3;
inline constexpr std::uint64_t init       = 4;
inline constexpr std::uint64_t train      = 5;
inline constexpr std::uint64_t selection  = 6;
inline constexpr std::uint64_t def_noise  = 7;
inline constexpr std::uint64_t attack     = 8;
inline constexpr std::uint64_t test_data  = 9;
inline constexpr std::uint64_t probe      = 10;
}  // namespace stream

// mt19937_64 has a standard-specified output sequence, so the engine itself is
// portable.  The standard *distributions* are not (their algorithms are
// implementation-defined), which is why the draw helpers below are hand-rolled.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).  53-bit mantissa construction.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).  Rejection sampling to avoid modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = eng_(); } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller.  The spare is cached, so the draw
    // sequence is a pure function of the seed.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Standard normal conditioned on |z| <= bound (redraw until accepted).
    double truncated_gaussian(double bound) {
        if (bound <= 0.0) throw std::invalid_argument("truncated_gaussian: bound must be positive");
        double z;
        do { z = gaussian(); } while (std::abs(z) > bound);
        return z;
    }

    // Fisher-Yates; depends only on this stream's state.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fedsim
