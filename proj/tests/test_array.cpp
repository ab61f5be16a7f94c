#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "villa/array.hpp"

using namespace villa;

TEST(Array, ShapeAndSize) {
  Array a({2, 3}, 1.5);
  EXPECT_EQ(a.rank(), 2u);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_EQ(a.dim(1), 3u);
  for (double v : a.data()) EXPECT_EQ(v, 1.5);
}

TEST(Array, RejectsValueCountMismatch) {
  EXPECT_THROW(Array({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Array, RejectsZeroDimension) { EXPECT_THROW(Array({2, 0}), DimensionError); }

TEST(Array, ScalarItem) {
  EXPECT_EQ(Array::scalar(4.0).item(), 4.0);
  EXPECT_THROW(Array({2}).item(), ContractError);
}

TEST(Array, BitwiseEquality) {
  Array a({1}, std::vector<double>{0.0});
  Array b({1}, std::vector<double>{-0.0});
  EXPECT_FALSE(a == b);
  EXPECT_TRUE(a == Array({1}, std::vector<double>{0.0}));
}

TEST(Array, AllFinite) {
  Array a({2}, std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_FALSE(a.all_finite());
  EXPECT_TRUE(Array({2}).all_finite());
}

TEST(FrobeniusNorm, ThreeFourFive) { EXPECT_EQ(frobenius_norm(Array({1, 2}, std::vector<double>{3, 4})), 5.0); }

TEST(FrobeniusNorm, ZeroTensor) { EXPECT_EQ(frobenius_norm(Array({3, 2})), 0.0); }

TEST(FrobeniusNorm, PerSample) {
  const Array t({2, 1, 2}, std::vector<double>{3, 4, 0, 0});
  const auto n = frobenius_norm_per_sample(t);
  ASSERT_EQ(n.size(), 2u);
  EXPECT_EQ(n[0], 5.0);
  EXPECT_EQ(n[1], 0.0);
}

TEST(FrobeniusNorm, EmptyArrayIsZero) { EXPECT_EQ(frobenius_norm(Array()), 0.0); }

TEST(Array, MaxAbsDiff) {
  const Array a({2}, std::vector<double>{1, 2});
  const Array b({2}, std::vector<double>{1.5, 1});
  EXPECT_EQ(max_abs_diff(a, b), 1.0);
  EXPECT_THROW(max_abs_diff(a, Array({3})), DimensionError);
}
