#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "nicon/errors.hpp"
#include "nicon/numkit.hpp"

using namespace nicon;

TEST(QuadForm, Examples) {
  EXPECT_DOUBLE_EQ(quad_form(Mat::Identity(2, 2), Vec::Ones(2)), 2.0);
  Mat q(2, 2);
  q << 3.0, 1.0, 1.0, 2.0;
  EXPECT_EQ(quad_form(q, Vec::Zero(2)), 0.0);
  const Vec d = (Vec(4) << 0.60, 0.32, 0.045, 0.035).finished();
  EXPECT_NEAR(quad_form(d.asDiagonal().toDenseMatrix(), Vec::Ones(4)), 1.0, 1e-15);
}

TEST(QuadForm, DimensionMismatchThrows) {
  EXPECT_THROW(quad_form(Mat::Identity(2, 2), Vec::Ones(3)), ConfigError);
  EXPECT_THROW(quad_form(Mat::Ones(2, 3), Vec::Ones(3)), ConfigError);
}

// lambda_min |x|^2 <= x^T Q x <= lambda_max |x|^2 for diagonal Q
TEST(QuadForm, DiagonalSandwich) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    Vec d(n), x(n);
    for (int i = 0; i < n; ++i) {
      d[i] = rng.uniform(0.01, 5.0);
      x[i] = rng.uniform(-3.0, 3.0);
    }
    const double v = quad_form(d.asDiagonal().toDenseMatrix(), x);
    EXPECT_GE(v, d.minCoeff() * x.squaredNorm() * (1 - 1e-12));
    EXPECT_LE(v, d.maxCoeff() * x.squaredNorm() * (1 + 1e-12));
  }
}

TEST(Rk4, DecayOneStep) {
  const VectorField f = [](const Vec& x) { return Vec(-x); };
  const Vec x = rk4_step(f, Vec::Ones(1), 0.1);
  EXPECT_NEAR(x[0], 0.90483750, 1e-7);
  EXPECT_NEAR(x[0], std::exp(-0.1), 1e-7);
}

TEST(Rk4, FixedPointAndConstantField) {
  const Vec x0 = (Vec(3) << 1.0, -2.0, 0.5).finished();
  const Vec c = (Vec(3) << 0.3, 0.0, -4.0).finished();
  EXPECT_EQ(rk4_step([](const Vec& x) { return Vec(Vec::Zero(x.size())); }, x0, 0.7), x0);
  const Vec y = rk4_step([&](const Vec&) { return c; }, x0, 0.25);
  EXPECT_TRUE(y.isApprox(x0 + 0.25 * c, 1e-15));
}

// exact for polynomial solutions up to degree 4: x' = t^3 written autonomously
TEST(Rk4, ExactForCubicForcing) {
  const VectorField f = [](const Vec& z) {
    Vec d(2);
    d << 1.0, 4.0 * z[0] * z[0] * z[0];
    return d;
  };
  const Vec z = rk4_step(f, Vec::Zero(2), 0.5);
  EXPECT_NEAR(z[1], std::pow(0.5, 4), 1e-15);
}

// local error is O(h^5), so halving h divides the one-step error by ~32
TEST(Rk4, OneStepErrorIsFifthOrder) {
  const VectorField f = [](const Vec& x) { return Vec(-x); };
  const double e1 = std::abs(rk4_step(f, Vec::Ones(1), 0.1)[0] - std::exp(-0.1));
  const double e2 = std::abs(rk4_step(f, Vec::Ones(1), 0.05)[0] - std::exp(-0.05));
  EXPECT_GT(e1 / e2, 28.0);
  EXPECT_LT(e1 / e2, 36.0);
}

// over a fixed horizon the errors add up to O(h^4): ratio ~16
TEST(Rk4, GlobalErrorIsFourthOrder) {
  const VectorField f = [](const Vec& x) { return Vec(-x); };
  auto error_at_one = [&](double h) {
    Vec x = Vec::Ones(1);
    for (int k = 0; k < static_cast<int>(std::lround(1.0 / h)); ++k) x = rk4_step(f, x, h);
    return std::abs(x[0] - std::exp(-1.0));
  };
  const double ratio = error_at_one(0.1) / error_at_one(0.05);
  EXPECT_GE(ratio, 12.0);
  EXPECT_LE(ratio, 20.0);
}

TEST(Rk4, NonFiniteDerivativeThrowsWithState) {
  const VectorField f = [](const Vec& x) {
    Vec d = x;
    d[0] = std::numeric_limits<double>::quiet_NaN();
    return d;
  };
  try {
    rk4_step(f, Vec::Ones(2), 0.1);
    FAIL() << "expected SimulationError";
  } catch (const SimulationError& e) {
    EXPECT_NE(e.state().find('1'), std::string::npos);
  }
}

TEST(SampleUniformBox, DegenerateBox) {
  Rng rng(1);
  const Vec v = (Vec(3) << 0.5, -1.0, 2.0).finished();
  EXPECT_EQ(sample_uniform_box(rng, v, v), v);
}

TEST(SampleUniformBox, InvertedBoundsThrow) {
  Rng rng(1);
  EXPECT_THROW(sample_uniform_box(rng, Vec::Ones(2), Vec::Zero(2)), ConfigError);
}

TEST(SampleUniformBox, SameSeedSameDraws) {
  Rng a(42), b(42);
  const Vec lo = -Vec::Ones(4), hi = Vec::Ones(4);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(sample_uniform_box(a, lo, hi), sample_uniform_box(b, lo, hi));
  }
}

TEST(SampleUniformBox, MeanWithinThreeSigma) {
  Rng rng(9);
  Vec sum = Vec::Zero(3);
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += sample_uniform_box(rng, Vec::Zero(3), Vec::Ones(3));
  for (int i = 0; i < 3; ++i) {
    EXPECT_GE(sum[i] / n, 0.47);
    EXPECT_LE(sum[i] / n, 0.53);
  }
}

TEST(Rng, GoldenValuesAreFrozen) {
  // pinned output of the generator; a change here breaks every stored dataset
  Rng rng(0);
  EXPECT_EQ(rng.next_u64(), 3746585686858627171ULL);
  EXPECT_EQ(rng.next_u64(), 6235967106033911276ULL);
  EXPECT_EQ(rng.next_u64(), 4964577235801436555ULL);
  Rng other(7, 3);
  EXPECT_EQ(other.uniform(), 0.38337004056291002);
  Rng other_stream(0, 1);
  EXPECT_NE(other_stream.next_u64(), 3746585686858627171ULL);
}

TEST(Rng, ValueDependsOnlyOnSeedStreamIndex) {
  Rng a(5, 2);
  for (int i = 0; i < 10; ++i) a.next_u64();
  const std::uint64_t tenth = a.next_u64();
  Rng b(5, 2);
  std::uint64_t v = 0;
  for (int i = 0; i <= 10; ++i) v = b.next_u64();
  EXPECT_EQ(v, tenth);
  EXPECT_EQ(a.counter(), 11u);
}

TEST(Rng, ChildDoesNotAdvanceParent) {
  Rng parent(8);
  const Rng copy = parent;
  Rng c1 = parent.child(3);
  Rng c2 = copy.child(3);
  EXPECT_EQ(parent.counter(), 0u);
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  Rng c3 = parent.child(4);
  EXPECT_NE(parent.child(3).next_u64(), c3.next_u64());
}

TEST(Rng, UniformRangeAndBelow) {
  Rng rng(17);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(rng.below(7), 7u);
  }
}

TEST(Shuffle, IsPermutationAndDeterministic) {
  std::vector<int> a(100), b;
  for (int i = 0; i < 100; ++i) a[i] = i;
  b = a;
  Rng r1(4), r2(4);
  shuffle(a, r1);
  shuffle(b, r2);
  EXPECT_EQ(a, b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
}
