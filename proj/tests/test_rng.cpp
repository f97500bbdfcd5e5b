#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <frankenfilter/rng.hpp>

namespace {

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> draws(ff::RngStream s, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = s.uniform();
  return out;
}

}  // namespace

TEST(RngStream, SameSeedSameDraws) {
  ff::RngStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
}

TEST(RngStream, DeriveTwiceIsIdentical) {
  const ff::RngStream root(7);
  EXPECT_EQ(draws(root.derive(0), 100), draws(root.derive(0), 100));
}

TEST(RngStream, SiblingStreamsUncorrelated) {
  const ff::RngStream root(7);
  const double r = correlation(draws(root.derive(0), 10000), draws(root.derive(1), 10000));
  EXPECT_LT(std::abs(r), 0.05);
}

TEST(RngStream, PathConcatenates) {
  const ff::RngStream root(3);
  const auto child = ff::derive_substream(ff::derive_substream(root, 0), 1);
  ASSERT_EQ(child.path().size(), 2u);
  EXPECT_EQ(child.path()[0], 0u);
  EXPECT_EQ(child.path()[1], 1u);
  EXPECT_EQ(child.root_seed(), 3u);
  EXPECT_TRUE(root.path().empty());
}

TEST(RngStream, DeriveIgnoresParentProgress) {
  ff::RngStream a(11);
  const ff::RngStream fresh(11);
  for (int i = 0; i < 57; ++i) a();
  EXPECT_EQ(draws(a.derive(4), 50), draws(fresh.derive(4), 50));
}

TEST(RngStream, DistinctSeedsDiffer) {
  EXPECT_NE(draws(ff::RngStream(1), 10), draws(ff::RngStream(2), 10));
  // Same path under different roots.
  EXPECT_NE(draws(ff::RngStream(1).derive(0), 10), draws(ff::RngStream(2).derive(0), 10));
}

TEST(RngStream, UniformOpenInterval) {
  ff::RngStream s(5);
  double mean = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    mean += u / n;
  }
  EXPECT_NEAR(mean, 0.5, 3 * std::sqrt(1.0 / 12 / n));
}

TEST(RngStream, PoissonMeanAndZeroRate) {
  ff::RngStream s(9);
  EXPECT_EQ(s.poisson(0.0), 0);
  double mean = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) mean += static_cast<double>(s.poisson(2.5)) / n;
  EXPECT_NEAR(mean, 2.5, 3 * std::sqrt(2.5 / n));
}
