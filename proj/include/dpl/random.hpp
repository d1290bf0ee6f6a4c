#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <utility>

// Distribution helpers with fixed algorithms on top of std::mt19937_64, so seeded outputs do not
// depend on the standard library's implementation-defined distributions.

namespace dpl {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

/// Standard normal via Box-Muller (one draw per call).
inline double standard_normal(Rng& rng)
{
    const double u1 = 1.0 - uniform01(rng); // (0, 1]
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <class T>
void shuffle(std::span<T> items, Rng& rng)
{
    for (std::size_t i = items.size(); i > 1; --i)
        std::swap(items[i - 1], items[uniform_index(rng, i)]);
}

/// Independent stream for (seed, index) pairs.
inline Rng derived_rng(std::uint64_t seed, std::uint64_t index)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
    return Rng(seq);
}

} // namespace dpl
