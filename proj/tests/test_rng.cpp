#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "mkv/parallel.hpp"
#include "mkv/rng.hpp"

using namespace mkv;

// Known-answer vectors published with Random123 (kat_vectors, philox4x32 10 rounds).
TEST(Philox, KnownAnswerZero) {
  const auto r = rng::philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(r[0], 0x6627e8d5u);
  EXPECT_EQ(r[1], 0xe169c58du);
  EXPECT_EQ(r[2], 0xbc57ac4cu);
  EXPECT_EQ(r[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerOnes) {
  const auto r = rng::philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(r[0], 0x408f276du);
  EXPECT_EQ(r[1], 0x41c83b0eu);
  EXPECT_EQ(r[2], 0xa20bc7c6u);
  EXPECT_EQ(r[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPi) {
  const auto r = rng::philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(r[0], 0xd16cfe09u);
  EXPECT_EQ(r[1], 0x94fdccebu);
  EXPECT_EQ(r[2], 0x5001e420u);
  EXPECT_EQ(r[3], 0x24126ea1u);
}

TEST(Seeds, DerivationIsStableAndSeparatesLabels) {
  EXPECT_EQ(rng::derive_seed(42, "noise"), rng::derive_seed(42, "noise"));
  EXPECT_NE(rng::derive_seed(42, "noise"), rng::derive_seed(42, "initial"));
  EXPECT_NE(rng::derive_seed(42, "noise", 0), rng::derive_seed(42, "noise", 1));
  EXPECT_NE(rng::derive_seed(42, "noise"), rng::derive_seed(43, "noise"));
  std::set<std::uint64_t> seen;
  for (std::uint64_t k = 0; k < 1000; ++k) seen.insert(rng::derive_seed(7, "replicate", k));
  EXPECT_EQ(seen.size(), 1000u);
}

TEST(Streams, UniformsLieInOpenInterval) {
  EXPECT_GT(rng::to_open_unit(0, 0), 0.0);
  EXPECT_LT(rng::to_open_unit(0xffffffffu, 0xffffffffu), 1.0);
  for (std::uint32_t k = 0; k < 1000; ++k) {
    const double u = rng::stream_uniform(3, k, 0, rng::Tag::test, 0);
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Streams, GaussianMomentsMatchStandardNormal) {
  const std::size_t M = 200000;
  std::vector<double> x(M), x2(M), x4(M);
  for (std::size_t i = 0; i < M; ++i) {
    x[i] = rng::stream_normal(11, i, 5, rng::Tag::test, static_cast<std::uint32_t>(i % 2));
    x2[i] = x[i] * x[i];
    x4[i] = x2[i] * x2[i];
  }
  EXPECT_NEAR(pairwise_mean(x), 0.0, 4.0 / std::sqrt(double(M)));
  EXPECT_NEAR(pairwise_mean(x2), 1.0, 4.0 * std::sqrt(2.0 / M));
  EXPECT_NEAR(pairwise_mean(x4), 3.0, 4.0 * std::sqrt(96.0 / M));
}

TEST(Streams, CounterFieldsAreIndependentCoordinates) {
  // Same seed, different particle / step / tag / block give different variates.
  const double base = rng::stream_normal(1, 0, 0, rng::Tag::noise, 0);
  EXPECT_NE(base, rng::stream_normal(1, 1, 0, rng::Tag::noise, 0));
  EXPECT_NE(base, rng::stream_normal(1, 0, 1, rng::Tag::noise, 0));
  EXPECT_NE(base, rng::stream_normal(1, 0, 0, rng::Tag::initial, 0));
  EXPECT_NE(base, rng::stream_normal(1, 0, 0, rng::Tag::noise, 2));
  EXPECT_NE(base, rng::stream_normal(2, 0, 0, rng::Tag::noise, 0));
  EXPECT_EQ(base, rng::stream_normal(1, 0, 0, rng::Tag::noise, 0));
  // High step words are kept.
  EXPECT_NE(rng::stream_normal(1, 0, 1, rng::Tag::noise, 0), rng::stream_normal(1, 0, (1ull << 32) + 1, rng::Tag::noise, 0));
}

TEST(Parallel, ExecutorVisitsEveryIndexOnceForAnyWorkerCount) {
  for (unsigned w : {1u, 2u, 3u, 8u}) {
    std::vector<int> hits(1000, 0);
    Executor(w).parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) ASSERT_EQ(h, 1);
  }
}

TEST(Parallel, PairwiseSumIsAccurate) {
  std::vector<double> v(1 << 20, 0.1);
  EXPECT_NEAR(pairwise_sum(v), 0.1 * double(v.size()), 1e-9);
  EXPECT_EQ(pairwise_sum(std::vector<double>{}), 0.0);
  EXPECT_DOUBLE_EQ(pairwise_mean(std::vector<double>{1.0, 2.0, 6.0}), 3.0);
}
