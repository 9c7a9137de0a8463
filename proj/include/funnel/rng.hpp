#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace funnel {

/// Engine owned by every agent.
using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Derives an independent key from a parent key and a label.
constexpr std::uint64_t derive_key(std::uint64_t parent, std::uint64_t label) noexcept
{
    return mix64(mix64(parent ^ 0x6a09e667f3bcc909ull) + mix64(label + 0x9e3779b97f4a7c15ull));
}

/**
 * Counter-based stream: the i-th output is a pure function of (key, i).
 *
 * Satisfies UniformRandomBitGenerator, so it can be handed to anything that
 * accepts an engine. Keyed per consumer, the environment's draws for
 * (consumer, step) do not depend on what the agent did.
 */
class CounterStream {
public:
    using result_type = std::uint64_t;

    constexpr explicit CounterStream(std::uint64_t key, std::uint64_t counter = 0) noexcept
        : key_(key), counter_(counter)
    {
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    constexpr result_type operator()() noexcept
    {
        return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ull);
    }

    constexpr std::uint64_t key() const noexcept { return key_; }
    constexpr std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

/// Uniform double in [0, 1) from the top 53 bits of one engine output.
template <class URBG>
double unit(URBG& g)
{
    static_assert(URBG::min() == 0 && URBG::max() == std::numeric_limits<std::uint64_t>::max(),
                  "unit() expects a full-range 64-bit engine");
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

/// Uniform index in [0, n), n > 0.
template <class URBG>
std::size_t uniform_index(URBG& g, std::size_t n)
{
    auto i = static_cast<std::size_t>(unit(g) * static_cast<double>(n));
    return i < n ? i : n - 1;
}

/// Draw from Beta(a, b) as a ratio of gammas.
template <class URBG>
double sample_beta(URBG& g, double a, double b)
{
    const double x = std::gamma_distribution<double>(a, 1.0)(g);
    const double y = std::gamma_distribution<double>(b, 1.0)(g);
    const double s = x + y;
    // Both gammas can underflow for tiny shapes; fall back to the mean.
    return s > 0.0 ? x / s : a / (a + b);
}

/// Labels for the substreams split off a run's master seed.
enum class Substream : std::uint64_t { environment = 1, agent = 2, schedule = 3, permutation = 4 };

constexpr std::uint64_t substream_key(std::uint64_t seed, Substream which) noexcept
{
    return derive_key(seed, static_cast<std::uint64_t>(which));
}

}  // namespace funnel
