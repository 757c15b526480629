#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rbcda/rng.hpp"

using rbcda::RandomStream;

TEST(RandomStream, EngineIsTheStandardMersenneTwister) {
    // The standard fixes the 10000th output of a default-seeded mt19937_64.
    RandomStream rng(std::mt19937_64::default_seed);
    std::uint64_t x = 0;
    for (int k = 0; k < 10000; ++k) x = rng.next();
    EXPECT_EQ(x, 9981545732273789042ull);
}

TEST(RandomStream, UniformUsesTopFiftyThreeBits) {
    RandomStream a(11), b(11);
    for (int k = 0; k < 1000; ++k) {
        const double u = a.uniform01();
        EXPECT_EQ(u, static_cast<double>(b.next() >> 11) * 0x1.0p-53);
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(RandomStream, NormalIsBoxMullerCosineFirst) {
    RandomStream a(5), b(5);
    for (int pair = 0; pair < 100; ++pair) {
        const double u1 = b.uniform01(), u2 = b.uniform01();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        EXPECT_EQ(a.normal(), r * std::cos(2.0 * std::numbers::pi * u2));
        EXPECT_EQ(a.normal(), r * std::sin(2.0 * std::numbers::pi * u2));
    }
}

TEST(RandomStream, NormalMoments) {
    RandomStream rng(99);
    const int n = 200000;
    double s = 0.0, s2 = 0.0, s4 = 0.0;
    for (int k = 0; k < n; ++k) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(n));
    EXPECT_LT(std::abs(var - 1.0), 4.0 * std::sqrt(2.0 / n));
    EXPECT_NEAR(s4 / n, 3.0, 4.0 * std::sqrt(96.0 / n));
}

TEST(RandomStream, SymmetricUniformRange) {
    RandomStream rng(3);
    double lo = 1.0, hi = -1.0;
    for (int k = 0; k < 100000; ++k) {
        const double x = rng.symmetric(0.1);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    EXPECT_GE(lo, -0.1);
    EXPECT_LT(hi, 0.1);
    EXPECT_LT(lo, -0.0999);
    EXPECT_GT(hi, 0.0999);
}
