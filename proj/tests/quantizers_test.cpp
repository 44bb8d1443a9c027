#include "qsdp/quantizers.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "qsdp/errors.hpp"
#include "test_support.hpp"

namespace qsdp::quant {
namespace {

using qsdp::testing::frac;
using qsdp::testing::RunningStats;
using qsdp::testing::coin_flip_variance;

TEST(QshiftScalar, RoundsToShiftedLattice) {
  EXPECT_DOUBLE_EQ(qshift_scalar(0.4, {1.0, 0.0}), 0.0);
  EXPECT_DOUBLE_EQ(qshift_scalar(0.4, {1.0, 0.25}), 0.25);
  EXPECT_DOUBLE_EQ(qshift_scalar(0.7, {0.5, 0.0}), 0.5);
}

TEST(QshiftScalar, TiesRoundToEven) {
  EXPECT_DOUBLE_EQ(qshift_scalar(0.5, {1.0, 0.0}), 0.0);
  EXPECT_DOUBLE_EQ(qshift_scalar(1.5, {1.0, 0.0}), 2.0);
  EXPECT_DOUBLE_EQ(qshift_scalar(-0.5, {1.0, 0.0}), 0.0);
}

TEST(GridSpec, RejectsBadParameters) {
  EXPECT_THROW((GridSpec{0.0, 0.0}.validate()), InvalidArgument);
  EXPECT_THROW((GridSpec{-1.0, 0.0}.validate()), InvalidArgument);
  EXPECT_THROW((GridSpec{1.0, 0.5}.validate()), InvalidArgument);
  EXPECT_NO_THROW((GridSpec{1.0, -0.5}.validate()));
}

TEST(QshiftQuantize, LatticePointsMapToThemselves) {
  const std::vector<double> v{0.0, 0.0, 0.0};
  const auto block = qshift_quantize(v, GridSpec{0.3, 0.0});
  EXPECT_EQ(dequantize(block, Scheme::shift), v);
}

TEST(QshiftQuantize, RejectsNonFiniteWithIndex) {
  Rng rng(1);
  const std::vector<double> v{0.0, 1.0, std::nan("")};
  try {
    qshift_quantize(v, 1.0, rng);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(qflip_quantize(v, 1.0, rng), InvalidArgument);
}

TEST(QshiftQuantize, MeanAndVarianceOfHalf) {
  constexpr int kSamples = 1'000'000;
  Rng rng(42);
  const std::vector<double> v{0.5};
  RunningStats stats;
  RunningStats sq_err;
  RunningStats code_sq_err;
  for (int i = 0; i < kSamples; ++i) {
    const auto block = qshift_quantize(v, 1.0, rng);
    const double q = dequantize(block, Scheme::shift)[0];
    stats.add(q);
    sq_err.add((q - 0.5) * (q - 0.5));
    code_sq_err.add((q - block.shift - 0.5) * (q - block.shift - 0.5));
  }
  EXPECT_NEAR(stats.mean(), 0.5, 4 * 0.5 / std::sqrt(kSamples));
  // The lattice part Q(v) - r is a fair coin between 0 and 1: 0.25 = {0.5}(1 - {0.5}).
  EXPECT_NEAR(code_sq_err.mean(), 0.25, 1e-12);
  // The decoded error itself is uniform on [-1/2, 1/2).
  EXPECT_NEAR(sq_err.mean(), 1.0 / 12, 0.01 / 12);
}

TEST(QflipQuantize, CoinProbabilities) {
  constexpr int kSamples = 1'000'000;
  Rng rng(7);
  const std::vector<double> v{0.3};
  int ups = 0;
  RunningStats sq_err_half;
  for (int i = 0; i < kSamples; ++i) {
    const double q = dequantize(qflip_quantize(v, 1.0, rng), Scheme::flip)[0];
    ASSERT_TRUE(q == 0.0 || q == 1.0) << q;
    ups += q == 1.0;
  }
  EXPECT_NEAR(static_cast<double>(ups) / kSamples, 0.3, 0.005);

  const std::vector<double> half{0.5};
  for (int i = 0; i < kSamples; ++i) {
    const double q = dequantize(qflip_quantize(half, 1.0, rng), Scheme::flip)[0];
    sq_err_half.add((q - 0.5) * (q - 0.5));
  }
  EXPECT_NEAR(sq_err_half.mean(), 0.25, 0.0025);
}

TEST(QflipQuantize, OnLatticeIsDeterministic) {
  Rng rng(3);
  const double delta = 0.25;
  const std::vector<double> v{2 * delta};
  for (int i = 0; i < 1000; ++i) {
    EXPECT_DOUBLE_EQ(dequantize(qflip_quantize(v, delta, rng), Scheme::flip)[0], 2 * delta);
  }
}

TEST(Dequantize, UndoesTheShift) {
  QuantizedBlock block;
  block.codes = {0};
  block.shift = 0.25;
  block.scale_lo = 0.0;
  block.scale_hi = 1.0;
  block.bit_width = 1;
  EXPECT_DOUBLE_EQ(dequantize(block, Scheme::shift)[0], 0.25);
}

TEST(Dequantize, RejectsCorruptedCode) {
  QuantizedBlock block;
  block.codes = {0, 4};
  block.bit_width = 2;
  block.scale_hi = 3.0;
  EXPECT_THROW(dequantize(block, Scheme::shift), InvalidArgument);
}

TEST(Dequantize, OutputLiesOnShiftedLattice) {
  Rng rng(11);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(16);
    for (double& x : v) x = normal(rng);
    const double delta = 0.01 + uniform01(rng);
    const auto block = qshift_quantize(v, delta, rng);
    for (double q : dequantize(block, Scheme::shift)) {
      const double k = (q - block.shift) / delta;
      EXPECT_NEAR(k, std::nearbyint(k), 1e-12 * std::max(1.0, std::abs(k)));
    }
  }
}

TEST(Dequantize, RequantizationIsIdempotent) {
  Rng rng(12);
  std::normal_distribution<double> normal(0.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(32);
    for (double& x : v) x = normal(rng);
    const double delta = 0.05 + uniform01(rng);
    const auto first = qshift_quantize(v, delta, rng);
    const auto again = qshift_quantize(dequantize(first, Scheme::shift), GridSpec{delta, first.shift});
    EXPECT_EQ(again.codes, first.codes);
  }
}

// ---------------------------------------------------------------------------

TEST(BucketedQuantize, PartitionsIntoBuckets) {
  Rng rng(1);
  std::vector<double> v(2048);
  std::iota(v.begin(), v.end(), 0.0);
  EXPECT_EQ(bucketed_quantize(v, {}, rng).size(), 2u);

  v.resize(1500);
  const auto blocks = bucketed_quantize(v, {}, rng);
  ASSERT_EQ(blocks.size(), 2u);
  EXPECT_EQ(blocks[0].length(), 1024u);
  EXPECT_EQ(blocks[1].length(), 476u);
}

TEST(BucketedQuantize, ConstantBucketIsExact) {
  Rng rng(2);
  const std::vector<double> v(3000, 3.0);
  for (Scheme s : {Scheme::shift, Scheme::uniform_stochastic, Scheme::nearest, Scheme::flip}) {
    BucketedOptions opts;
    opts.scheme = s;
    const auto blocks = bucketed_quantize(v, opts, rng);
    for (const auto& b : blocks) {
      EXPECT_EQ(b.scale_lo, 3.0);
      EXPECT_EQ(b.scale_hi, 3.0);
      EXPECT_TRUE(std::all_of(b.codes.begin(), b.codes.end(), [](auto c) { return c == 0; }));
    }
    EXPECT_EQ(bucketed_dequantize(blocks, s), v);
  }
}

TEST(BucketedQuantize, EachBucketDrawsItsOwnShift) {
  Rng rng(5);
  std::normal_distribution<double> normal;
  std::vector<double> v(8 * 1024);
  for (double& x : v) x = normal(rng);
  BucketedOptions opts;
  opts.scheme = Scheme::shift;
  const auto blocks = bucketed_quantize(v, opts, rng);
  ASSERT_EQ(blocks.size(), 8u);
  for (std::size_t i = 1; i < blocks.size(); ++i) EXPECT_NE(blocks[i].shift, blocks[0].shift);
}

TEST(BucketedQuantize, NearestRoundTripErrorWithinOneStep) {
  Rng rng(6);
  std::normal_distribution<double> normal(1.0, 5.0);
  for (unsigned bits : {1u, 2u, 4u, 8u, 12u}) {
    std::vector<double> v(3000);
    for (double& x : v) x = normal(rng);
    BucketedOptions opts;
    opts.scheme = Scheme::nearest;
    opts.bit_width = bits;
    const auto blocks = bucketed_quantize(v, opts, rng);
    const auto out = bucketed_dequantize(blocks, Scheme::nearest);
    std::size_t offset = 0;
    for (const auto& b : blocks) {
      const double bound = (b.scale_hi - b.scale_lo) / static_cast<double>(b.max_code());
      for (std::size_t i = 0; i < b.length(); ++i) {
        EXPECT_LE(std::abs(out[offset + i] - v[offset + i]), bound * (0.5 + 1e-9));
      }
      offset += b.length();
    }
  }
}

TEST(BucketedQuantize, MetadataIsF32Representable) {
  Rng rng(8);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(2500);
  for (double& x : v) x = normal(rng) * 1e-3 + 0.1;
  BucketedOptions opts;
  opts.scheme = Scheme::shift;
  for (const auto& b : bucketed_quantize(v, opts, rng)) {
    EXPECT_EQ(static_cast<double>(static_cast<float>(b.scale_lo)), b.scale_lo);
    EXPECT_EQ(static_cast<double>(static_cast<float>(b.scale_hi)), b.scale_hi);
    EXPECT_EQ(static_cast<double>(static_cast<float>(b.shift)), b.shift);
  }
}

TEST(BucketedQuantize, StochasticSchemesAreUnbiased) {
  Rng rng(9);
  const std::vector<double> v{-1.0, 0.123, 0.77, 2.0, 1.5};
  for (Scheme s : {Scheme::shift, Scheme::uniform_stochastic}) {
    BucketedOptions opts;
    opts.scheme = s;
    opts.bit_width = 2;
    std::vector<RunningStats> stats(v.size());
    for (int i = 0; i < 200'000; ++i) {
      const auto out = bucketed_dequantize(bucketed_quantize(v, opts, rng), s);
      for (std::size_t j = 0; j < v.size(); ++j) stats[j].add(out[j]);
    }
    for (std::size_t j = 0; j < v.size(); ++j) {
      EXPECT_NEAR(stats[j].mean(), v[j], 4 * stats[j].std_error() + 1e-7) << to_string(s) << " j=" << j;
    }
  }
}

TEST(BucketedQuantize, FullPrecisionPassesF32Through) {
  Rng rng(10);
  const std::vector<double> v{1.0f, -2.5f, 3.25f, 1e-20f};
  BucketedOptions opts;
  opts.scheme = Scheme::full_precision;
  const auto blocks = bucketed_quantize(v, opts, rng);
  ASSERT_EQ(blocks.size(), 1u);
  EXPECT_EQ(blocks[0].bit_width, 32u);
  EXPECT_EQ(bucketed_dequantize(blocks, Scheme::full_precision), v);
}

TEST(BucketedQuantize, RejectsBadBitWidth) {
  Rng rng(1);
  const std::vector<double> v{1.0, 2.0};
  BucketedOptions opts;
  opts.bit_width = 0;
  EXPECT_THROW(bucketed_quantize(v, opts, rng), InvalidArgument);
  opts.bit_width = 17;
  EXPECT_THROW(bucketed_quantize(v, opts, rng), InvalidArgument);
  EXPECT_THROW(bucketed_quantize(std::vector<double>{}, {}, rng), InvalidArgument);
}

// ---------------------------------------------------------------------------

TEST(UniformStochastic, OnLevelIsDeterministic) {
  Rng rng(1);
  for (unsigned bits : {1u, 3u, 8u}) {
    const double m = static_cast<double>((1u << bits) - 1);
    for (unsigned k = 0; k <= static_cast<unsigned>(m); ++k) {
      const std::vector<double> v(100, k / m);
      for (auto c : uniform_stochastic_quantize(v, bits, rng)) EXPECT_EQ(c, k);
    }
  }
}

TEST(UniformStochastic, MidpointSplitsEvenly) {
  constexpr int kSamples = 1'000'000;
  Rng rng(2);
  const unsigned bits = 3;
  const double m = 7.0;
  const std::vector<double> v(kSamples, 2.5 / m);
  const auto codes = uniform_stochastic_quantize(v, bits, rng);
  const auto ups = std::count(codes.begin(), codes.end(), 3u);
  EXPECT_EQ(ups + std::count(codes.begin(), codes.end(), 2u), kSamples);
  EXPECT_NEAR(static_cast<double>(ups) / kSamples, 0.5, 0.005);
}

TEST(UniformStochastic, MeanMatchesInput) {
  constexpr int kSamples = 1'000'000;
  Rng rng(3);
  const unsigned bits = 4;
  const double m = 15.0;
  for (double x : {0.0137, 0.5, 0.77, 0.999}) {
    const std::vector<double> v(kSamples, x);
    RunningStats stats;
    for (auto c : uniform_stochastic_quantize(v, bits, rng)) stats.add(c / m);
    EXPECT_NEAR(stats.mean(), x, 4 * stats.std_error() + 1e-12);
  }
}

TEST(UniformStochastic, RejectsOutOfRange) {
  Rng rng(4);
  EXPECT_THROW(uniform_stochastic_quantize(std::vector<double>{1.01}, 4, rng), InvalidArgument);
  EXPECT_THROW(uniform_stochastic_quantize(std::vector<double>{-0.01}, 4, rng), InvalidArgument);
}

// ---------------------------------------------------------------------------

TEST(LevelTable, Invariants) {
  EXPECT_THROW(LevelTable({0.0, 0.5, 1.0}), InvalidArgument);
  EXPECT_THROW(LevelTable({0.0, 0.0}), InvalidArgument);
  EXPECT_THROW(LevelTable({0.5, 0.1}), InvalidArgument);
  EXPECT_EQ(LevelTable::uniform(4).size(), 16u);
  EXPECT_EQ(LevelTable::uniform(4).bit_width(), 4u);
}

TEST(QuantizeWithLevels, NearestAndClamp) {
  Rng rng(1);
  const LevelTable table({0.0, 0.2, 0.7, 1.0});
  const auto codes = quantize_with_levels(std::vector<double>{0.2, 0.7, 1.5, -0.3, 0.44, 0.46}, table, false, rng);
  EXPECT_EQ(codes, (std::vector<std::uint32_t>{1, 2, 3, 0, 1, 2}));
}

TEST(QuantizeWithLevels, StochasticQuarterGap) {
  constexpr int kSamples = 1'000'000;
  Rng rng(2);
  const LevelTable table({0.0, 0.2, 0.6, 1.0});
  const std::vector<double> v(kSamples, 0.3);  // 1/4 of the way from 0.2 to 0.6
  const auto codes = quantize_with_levels(v, table, true, rng);
  const auto lower = std::count(codes.begin(), codes.end(), 1u);
  EXPECT_EQ(lower + std::count(codes.begin(), codes.end(), 2u), kSamples);
  EXPECT_NEAR(static_cast<double>(lower) / kSamples, 0.75, 0.005);
}

TEST(LearnLevels, ValuesOnLevelsLeaveTableUnchanged) {
  const LevelTable table = LevelTable::uniform(2);
  std::vector<double> values;
  for (int rep = 0; rep < 10; ++rep) {
    for (double q : table.levels()) values.push_back(q);
  }
  const auto learned = learn_levels(values, table);
  EXPECT_FALSE(learned.insufficient_data);
  for (std::size_t i = 0; i < table.size(); ++i) EXPECT_NEAR(learned.table[i], table[i], 1e-15);
}

TEST(LearnLevels, SingleUpdateFollowsRule) {
  // One value normalizes to 0 in its own bucket; the only level moves toward it.
  const LevelTable table({0.5});
  const auto learned = learn_levels(std::vector<double>{3.0}, table, 0.01);
  EXPECT_DOUBLE_EQ(learned.table[0], 0.5 - 0.01 * (0.5 - 0.0));
}

TEST(LearnLevels, TooFewDistinctValues) {
  const LevelTable table = LevelTable::uniform(3);
  const auto learned = learn_levels(std::vector<double>{1.0, 2.0, 2.0, 1.0}, table);
  EXPECT_TRUE(learned.insufficient_data);
  EXPECT_EQ(learned.table, table);
}

TEST(LearnLevels, BeatsUniformOnGaussianData) {
  Rng rng(17);
  std::normal_distribution<double> normal;
  std::vector<double> values(50'000);
  for (double& x : values) x = normal(rng);
  const LevelTable uniform = LevelTable::uniform(4);
  const auto learned = learn_levels(values, uniform);
  EXPECT_LT(relative_level_error(values, learned.table), relative_level_error(values, uniform));
}

TEST(LearnLevels, OutputStaysStrictlyIncreasing) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const unsigned bits = 1 + static_cast<unsigned>(rng() % 5);
    std::vector<double> values(500 + rng() % 3000);
    std::exponential_distribution<double> expo(1.0 + uniform01(rng));
    for (double& x : values) x = expo(rng) * (rng() % 2 ? 1 : -1);
    const double lr = 0.001 + 0.5 * uniform01(rng);
    const auto learned = learn_levels(values, LevelTable::uniform(bits), lr);
    ASSERT_EQ(learned.table.size(), std::size_t{1} << bits);
    for (std::size_t i = 1; i < learned.table.size(); ++i) EXPECT_LT(learned.table[i - 1], learned.table[i]);
  }
}

// ---------------------------------------------------------------------------
// Identities of the random-shift and coin-flip quantizers, checked by Monte Carlo.

TEST(QuantizerProperties, UnbiasedForRandomVectors) {
  constexpr int kSamples = 200'000;
  Rng rng(31);
  std::normal_distribution<double> normal(0.0, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> v(4);
    for (double& x : v) x = normal(rng);
    const double delta = 0.05 + uniform01(rng);
    std::vector<RunningStats> shift_stats(v.size()), flip_stats(v.size());
    for (int i = 0; i < kSamples; ++i) {
      const auto s = dequantize(qshift_quantize(v, delta, rng), Scheme::shift);
      const auto f = dequantize(qflip_quantize(v, delta, rng), Scheme::flip);
      for (std::size_t j = 0; j < v.size(); ++j) {
        shift_stats[j].add(s[j]);
        flip_stats[j].add(f[j]);
      }
    }
    const double tol = 4 * delta / (2 * std::sqrt(kSamples));
    for (std::size_t j = 0; j < v.size(); ++j) {
      EXPECT_NEAR(shift_stats[j].mean(), v[j], tol);
      EXPECT_NEAR(flip_stats[j].mean(), v[j], tol);
    }
  }
}

TEST(QuantizerProperties, VarianceIdentity) {
  constexpr int kSamples = 1'000'000;
  Rng rng(37);
  // Fractional parts away from 0 and 1, where a 1% check has >5 sigma headroom.
  for (double x : {0.3, 1.77, -2.45}) {
    const double delta = 0.5;
    RunningStats shift_err, shift_code_err, flip_err;
    const std::vector<double> v{x};
    for (int i = 0; i < kSamples; ++i) {
      const auto block = qshift_quantize(v, delta, rng);
      const double q = dequantize(block, Scheme::shift)[0];
      const double f = dequantize(qflip_quantize(v, delta, rng), Scheme::flip)[0] - x;
      shift_err.add((q - x) * (q - x));
      shift_code_err.add((q - block.shift - x) * (q - block.shift - x));
      flip_err.add(f * f);
    }
    const double expected = coin_flip_variance(x, delta);
    EXPECT_NEAR(flip_err.mean(), expected, 0.01 * expected) << x;
    EXPECT_NEAR(shift_code_err.mean(), expected, 0.01 * expected) << x;
    const double uniform = delta * delta / 12;
    EXPECT_NEAR(shift_err.mean(), uniform, 0.01 * uniform) << x;
  }
}

TEST(QuantizerProperties, SparsityBound) {
  constexpr int kSamples = 100'000;
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const double delta = 0.1 + uniform01(rng);
    std::vector<double> v(16);
    double l1 = 0.0;
    for (double& x : v) {
      x = (2 * uniform01(rng) - 1) * delta;
      l1 += std::abs(x);
    }
    RunningStats shift_nnz, flip_nnz;
    for (int i = 0; i < kSamples; ++i) {
      const auto k = lattice_round(v, GridSpec{delta, sample_shift(delta, rng)});
      shift_nnz.add(static_cast<double>(std::count_if(k.begin(), k.end(), [](auto c) { return c != 0; })));
      const auto f = dequantize(qflip_quantize(v, delta, rng), Scheme::flip);
      flip_nnz.add(static_cast<double>(
          std::count_if(f.begin(), f.end(), [&](double c) { return std::abs(c) > delta / 2; })));
    }
    EXPECT_LE(shift_nnz.mean(), l1 / delta + 3 * shift_nnz.std_error());
    EXPECT_LE(flip_nnz.mean(), l1 / delta + 3 * flip_nnz.std_error());
  }
}

TEST(QuantizerProperties, FractionalInequality) {
  Rng rng(43);
  for (int i = 0; i < 100'000; ++i) {
    const double y = (uniform01(rng) - 0.5) * 2000.0;
    const int k = 1 + static_cast<int>(rng() % 64);
    const double lhs = frac(y) * (1 - frac(y));
    const double rhs = k * frac(y / k) * (1 - frac(y / k));
    EXPECT_LE(lhs, rhs + 1e-12) << "y=" << y << " k=" << k;
  }
}

TEST(QuantizerProperties, GridRatioBound) {
  constexpr int kShifts = 20'000;
  Rng rng(47);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int ratio : {2, 4, 8, 16}) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> x(8);
      for (double& xi : x) xi = normal(rng);
      const double coarse = 0.5;
      const double fine = coarse / ratio;
      RunningStats lhs, rhs;
      for (int i = 0; i < kShifts; ++i) {
        const GridSpec f{fine, sample_shift(fine, rng)};
        const GridSpec c{coarse, sample_shift(coarse, rng)};
        double el = 0.0, er = 0.0;
        for (double xi : x) {
          el += std::pow(qshift_scalar(xi, f) - xi, 2);
          er += std::pow(qshift_scalar(xi, c) - xi, 2);
        }
        lhs.add(el);
        rhs.add(er * fine / coarse);
      }
      const double se = std::hypot(lhs.std_error(), rhs.std_error());
      EXPECT_LE(lhs.mean(), rhs.mean() + 3 * se) << "ratio " << ratio;
    }
  }
}

}  // namespace
}  // namespace qsdp::quant
