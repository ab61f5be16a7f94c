#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "test_util.hpp"
#include "villa/adversary.hpp"

using namespace villa;
using villa::testing::random_array;

namespace {

Array values(Shape shape, std::vector<double> v) { return Array(std::move(shape), v); }

double max_sample_norm(const Array& d) {
  double worst = 0.0;
  for (double n : frobenius_norm_per_sample(d)) worst = std::max(worst, n);
  return worst;
}

}  // namespace

TEST(InitDelta, ZeroEpsilonIsZero) {
  std::mt19937_64 rng(1);
  const Array d = init_delta({3, 4, 5}, 0.0, rng);
  for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitDelta, ElementwiseBoundAndBall) {
  // 64 entries per sample: every entry within 1/sqrt(64) = 0.125 of zero.
  std::mt19937_64 rng(2);
  const Array d = init_delta({50, 8, 8}, 1.0, rng);
  for (double v : d.data()) EXPECT_LE(std::abs(v), 0.125);
  EXPECT_LE(max_sample_norm(d), 1.0);
}

TEST(InitDelta, SameSeedIsBitwiseIdentical) {
  std::mt19937_64 a(3);
  std::mt19937_64 b(3);
  EXPECT_TRUE(init_delta({4, 3, 2}, 0.7, a) == init_delta({4, 3, 2}, 0.7, b));
}

TEST(InitDelta, PaddedPositionsAreZero) {
  std::mt19937_64 rng(4);
  const Array mask = values({2, 3}, {1, 1, 0, 1, 0, 0});
  const Array d = init_delta({2, 3, 4}, 1.0, rng, &mask);
  for (std::size_t p = 0; p < 6; ++p) {
    for (std::size_t k = 0; k < 4; ++k) {
      if (mask[p] == 0.0) {
        EXPECT_EQ(d[p * 4 + k], 0.0);
      } else {
        EXPECT_NE(d[p * 4 + k], 0.0);
      }
    }
  }
}

TEST(InitDelta, NegativeEpsilonIsContractError) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(init_delta({1, 2}, -0.1, rng), ContractError);
}

TEST(AscentStep, ClosedFormExample) {
  // g / ||g|| = [[0, 0.6], [0.8, 0]]; step 0.1 stays inside the unit ball.
  const Array d({1, 2, 2});
  const Array g = values({1, 2, 2}, {0, 3, 4, 0});
  const Array out = ascent_step(d, g, 0.1, 1.0);
  EXPECT_NEAR(out[0], 0.0, 1e-15);
  EXPECT_NEAR(out[1], 0.06, 1e-15);
  EXPECT_NEAR(out[2], 0.08, 1e-15);
  EXPECT_NEAR(out[3], 0.0, 1e-15);
}

TEST(AscentStep, ZeroGradientLeavesDeltaUnchanged) {
  const Array d = values({1, 2}, {0.3, -0.2});
  EXPECT_TRUE(ascent_step(d, Array({1, 2}), 0.5, 1.0) == d);
  // Below the 1e-12 guard counts as zero too.
  EXPECT_TRUE(ascent_step(d, values({1, 2}, {1e-13, 0}), 0.5, 1.0) == d);
}

TEST(AscentStep, ZeroGuardIsPerSample) {
  const Array d({2, 2});
  const Array g = values({2, 2}, {0, 0, 0, 2});
  const Array out = ascent_step(d, g, 0.1, 1.0);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_NEAR(out[3], 0.1, 1e-15);
}

TEST(AscentStep, RadialStepOnTheSphereStaysOnTheSphere) {
  const Array d = values({1, 2}, {0.6, 0.8});  // norm 1
  const Array out = ascent_step(d, values({1, 2}, {3, 4}), 0.5, 1.0);
  EXPECT_NEAR(frobenius_norm(out), 1.0, 1e-12);
  EXPECT_LE(frobenius_norm(out), 1.0);
  EXPECT_NEAR(out[0], 0.6, 1e-12);
  EXPECT_NEAR(out[1], 0.8, 1e-12);
}

TEST(AscentStep, ZeroStepIsIdentity) {
  std::mt19937_64 rng(6);
  const Array d = init_delta({3, 4, 2}, 0.5, rng);
  const Array g = random_array({3, 4, 2}, rng);
  EXPECT_TRUE(ascent_step(d, g, 0.0, 0.5) == d);
}

TEST(AscentStep, GradientScaleInvariance) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const Array d = init_delta({3, 5, 4}, 1.0, rng);
    Array g = random_array({3, 5, 4}, rng);
    const Array base = ascent_step(d, g, 0.3, 1.0);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    const double c = std::pow(10.0, u(rng));
    Array scaled = g;
    scaled *= c;
    EXPECT_LE(max_abs_diff(ascent_step(d, scaled, 0.3, 1.0), base), 1e-12) << "scale " << c;
  }
}

TEST(AscentStep, PaddedPositionsStayZero) {
  const Array mask = values({1, 2}, {1, 0});
  const Array d({1, 2, 2});
  const Array g = values({1, 2, 2}, {1, 1, 5, 5});
  const Array out = ascent_step(d, g, 0.1, 1.0, &mask);
  EXPECT_EQ(out[2], 0.0);
  EXPECT_EQ(out[3], 0.0);
  // The normalization ignores padded gradient entries.
  EXPECT_NEAR(frobenius_norm(out), 0.1, 1e-15);
}

TEST(AscentStep, NonFiniteGradientIsDomainError) {
  const Array d({1, 2});
  EXPECT_THROW(ascent_step(d, values({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 0}), 0.1, 1.0),
               NumericDomainError);
  EXPECT_THROW(ascent_step(d, values({1, 2}, {std::numeric_limits<double>::infinity(), 0}), 0.1, 1.0),
               NumericDomainError);
}

TEST(AscentStep, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(ascent_step(Array({1, 2}), Array({1, 3}), 0.1, 1.0), DimensionError);
}

TEST(Project, InsideOrOnBoundaryIsUnchanged) {
  const Array d = values({1, 2}, {3, 4});
  EXPECT_TRUE(project(d, 5.0) == d);
}

TEST(Project, RadialScaling) {
  const Array out = project(values({1, 2}, {3, 4}), 2.5);
  EXPECT_NEAR(out[0], 1.5, 1e-15);
  EXPECT_NEAR(out[1], 2.0, 1e-15);
  EXPECT_LE(frobenius_norm(out), 2.5);
}

TEST(Project, ZeroStaysZero) {
  for (double eps : {0.0, 0.1, 3.0}) {
    const Array out = project(Array({2, 3}), eps);
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Project, PerSampleNotPerBatch) {
  // Sample 0 is inside the ball; sample 1 is not. Only sample 1 shrinks.
  const Array d = values({2, 2}, {0.3, 0.4, 3, 4});
  const Array out = project(d, 1.0);
  EXPECT_EQ(out[0], 0.3);
  EXPECT_EQ(out[1], 0.4);
  EXPECT_NEAR(out[2], 0.6, 1e-15);
  EXPECT_NEAR(out[3], 0.8, 1e-15);
}

TEST(Project, NegativeEpsilonIsContractError) { EXPECT_THROW(project(Array({1, 1}), -1.0), ContractError); }

TEST(Project, BitwiseIdempotent) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const Array d = random_array({2, 3, 4}, rng, 3.0);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    const double eps = u(rng);
    const Array once = project(d, eps);
    EXPECT_TRUE(project(once, eps) == once);
  }
}

TEST(BallInvariant, FuzzedOperationSequences) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> op(0, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int seq = 0; seq < 1000; ++seq) {
    const std::size_t b = 1 + rng() % 4;
    const std::size_t p = 1 + rng() % 5;
    const std::size_t w = 1 + rng() % 6;
    const double eps = u(rng) < 0.1 ? 0.0 : std::pow(10.0, -3.0 + 4.0 * u(rng));
    Array mask({b, p}, 1.0);
    for (double& m : mask.values()) m = u(rng) < 0.2 ? 0.0 : 1.0;
    Array d = init_delta({b, p, w}, eps, rng, &mask);
    for (int step = 0; step < 20; ++step) {
      switch (op(rng)) {
        case 0: d = init_delta({b, p, w}, eps, rng, &mask); break;
        case 1: {
          const double step_size = std::pow(10.0, -4.0 + 5.0 * u(rng));
          d = ascent_step(d, random_array({b, p, w}, rng, std::pow(10.0, -8.0 + 12.0 * u(rng))), step_size, eps, &mask);
          break;
        }
        default: d = project(d, eps); break;
      }
      ASSERT_LE(max_sample_norm(d), eps + 1e-9) << "sequence " << seq << " step " << step;
      for (std::size_t i = 0; i < b * p; ++i) {
        if (mask[i] != 0.0) continue;
        for (std::size_t k = 0; k < w; ++k) ASSERT_EQ(d[i * w + k], 0.0);
      }
    }
  }
}

TEST(Modality, ParseAndPredicates) {
  EXPECT_EQ(parse_modality("txt"), Modality::txt);
  EXPECT_EQ(parse_modality("img"), Modality::img);
  EXPECT_EQ(parse_modality("both"), Modality::both);
  EXPECT_THROW(parse_modality("audio"), ContractError);
  EXPECT_TRUE(perturbs_text(Modality::both));
  EXPECT_FALSE(perturbs_image(Modality::txt));
  EXPECT_FALSE(perturbs_text(Modality::img));
}
