#include <gtest/gtest.h>

#include <set>

#include "funnel/rng.hpp"

using namespace funnel;

TEST(CounterStream, OutputIsPureFunctionOfKeyAndCounter)
{
    CounterStream a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
    CounterStream c(42, 50);
    CounterStream d(42);
    for (int i = 0; i < 50; ++i) d();
    EXPECT_EQ(c(), d());
}

TEST(CounterStream, DifferentKeysDiverge)
{
    CounterStream a(1), b(2);
    int same = 0;
    for (int i = 0; i < 1000; ++i) same += a() == b();
    EXPECT_EQ(same, 0);
}

TEST(Rng, UnitStaysInHalfOpenInterval)
{
    CounterStream g(7);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = unit(g);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LT(hi, 1.0);
    EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(Rng, UniformIndexCoversRange)
{
    Rng g(3);
    std::vector<int> hits(5, 0);
    for (int i = 0; i < 50000; ++i) ++hits[uniform_index(g, 5)];
    for (int h : hits) EXPECT_NEAR(h / 50000.0, 0.2, 0.01);
}

TEST(Rng, BetaSampleMeanMatches)
{
    Rng g(11);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += sample_beta(g, 3.0, 7.0);
    EXPECT_NEAR(sum / n, 0.3, 0.003);
}

TEST(Rng, BetaSampleHandlesTinyShapes)
{
    Rng g(5);
    for (int i = 0; i < 1000; ++i) {
        const double x = sample_beta(g, 1e-3, 1e-3);
        EXPECT_GE(x, 0.0);
        EXPECT_LE(x, 1.0);
    }
}

TEST(Substreams, AreDistinctPerLabelAndSeed)
{
    std::set<std::uint64_t> keys;
    for (std::uint64_t seed = 0; seed < 50; ++seed)
        for (auto s : {Substream::environment, Substream::agent, Substream::schedule, Substream::permutation})
            keys.insert(substream_key(seed, s));
    EXPECT_EQ(keys.size(), 200u);
}
