// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "slash/metrics.hpp"
#include "metric_oracles.hpp"

using namespace slash;
using namespace slash::oracle;

// ---------------------------------------------------------------------------
// hungarian

TEST(Hungarian, IdentityFavoringMatrix) {
  CostMatrix c(3, 3, {0, 1, 1, 1, 0, 1, 1, 1, 0});
  auto a = hungarian(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(a.total_cost, 0.0);
}

TEST(Hungarian, SingleEntry) {
  auto a = hungarian(CostMatrix(1, 1, {4.5}));
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0}));
  EXPECT_EQ(a.total_cost, 4.5);
}

TEST(Hungarian, NanIsRejected) {
  EXPECT_THROW(hungarian(CostMatrix(2, 2, {0, std::nan(""), 1, 1})), std::invalid_argument);
  EXPECT_THROW(hungarian(CostMatrix(1, 2, {0, INFINITY})), std::invalid_argument);
}

TEST(Hungarian, RectangularMatchesMinSide) {
  CostMatrix wide(2, 4, {5, 1, 9, 9, 9, 9, 9, 0});
  auto a = hungarian(wide);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{1, 3}));
  EXPECT_EQ(a.total_cost, 1.0);
  CostMatrix tall(3, 1, {3, -2, 7});
  auto b = hungarian(tall);
  EXPECT_EQ(b.row_to_col, (std::vector<int>{-1, 0, -1}));
  EXPECT_EQ(b.matched(), 1u);
}

TEST(Hungarian, MatchesPermutationEnumeration6x6) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> d(0, 20);
  for (int trial = 0; trial < 200; ++trial) {
    CostMatrix c(6, 6);
    for (auto& v : c.values) v = d(rng);
    EXPECT_EQ(hungarian(c).total_cost, brute_force_assignment(c)) << "trial " << trial;
  }
}

TEST(Hungarian, MatchesEnumerationOnRectangularAndNegative) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim(1, 7), d(-10, 10);
  for (int trial = 0; trial < 200; ++trial) {
    CostMatrix c(dim(rng), dim(rng));
    for (auto& v : c.values) v = d(rng);
    auto a = hungarian(c);
    EXPECT_EQ(a.total_cost, brute_force_assignment(c)) << c.rows << "x" << c.cols;
    EXPECT_EQ(a.matched(), std::min(c.rows, c.cols));
  }
}

TEST(Hungarian, NeverWorseThanRandomAssignments) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    CostMatrix c(7, 5);
    for (auto& v : c.values) v = d(rng);
    const double best = hungarian(c).total_cost;
    std::vector<std::size_t> rows(7);
    std::iota(rows.begin(), rows.end(), 0);
    for (int k = 0; k < 1000; ++k) {
      std::shuffle(rows.begin(), rows.end(), rng);
      double cost = 0;
      for (std::size_t j = 0; j < 5; ++j) cost += c(rows[j], j);
      ASSERT_LE(best, cost + 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// ARI

TEST(Ari, IdenticalPartitionsScoreOne) {
  std::mt19937_64 rng(4);
  auto s = random_segmentation(8, 8, 5, rng);
  EXPECT_EQ(ari(s, s), 1.0);
}

TEST(Ari, SingleClusterAgainstBalancedSegmentsIsZero) {
  Segmentation one(4, 4, std::vector<int>(16, 0));
  std::vector<int> halves(16, 0);
  std::fill(halves.begin() + 8, halves.end(), 1);
  EXPECT_EQ(ari(one, Segmentation(4, 4, halves)), 0.0);
}

TEST(Ari, ToyPairMatchesHandComputation) {
  // 4x4: gt quadrants-ish, pred shifts one column of the right half.
  Segmentation gt(4, 4, {0, 0, 1, 1,  //
                         0, 0, 1, 1,  //
                         2, 2, 3, 3,  //
                         2, 2, 3, 3});
  Segmentation pred(4, 4, {0, 0, 0, 1,  //
                           0, 0, 0, 1,  //
                           2, 2, 2, 3,  //
                           2, 2, 2, 3});
  // Contingency rows (pred) x cols (gt): [4,2,0,0],[0,2,0,0],[0,0,4,2],[0,0,0,2].
  // index = 6+1+1+6+1+1 = 16; pred sums: 15,1,15,1 -> 32; gt sums: 6*4 = 24; total = 120.
  const double expected_index = 32.0 * 24.0 / 120.0;
  const double want = (16.0 - expected_index) / (0.5 * (32 + 24) - expected_index);
  EXPECT_NEAR(ari(pred, gt), want, 1e-15);
  EXPECT_NEAR(ari(pred, gt), pair_counting_ari(pred.labels, gt.labels), 1e-12);
}

TEST(Ari, DegenerateConventions) {
  Segmentation a(1, 1, {0}), b(1, 1, {3});
  EXPECT_EQ(ari(a, b), 1.0);
  Segmentation all_one(2, 2, {1, 1, 1, 1}), singletons(2, 2, {0, 1, 2, 3});
  EXPECT_EQ(ari(all_one, all_one), 1.0);
  EXPECT_EQ(ari(singletons, singletons), 1.0);
  EXPECT_EQ(ari(all_one, singletons), 0.0);
}

TEST(Ari, MatchesPairCountingOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_segmentation(8, 8, 2 + trial % 5, rng);
    auto b = random_segmentation(8, 8, 2 + trial % 4, rng);
    EXPECT_NEAR(ari(a, b), pair_counting_ari(a.labels, b.labels), 1e-10);
  }
}

TEST(Ari, SymmetricAndRelabelInvariantExactly) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_segmentation(8, 8, 4, rng);
    auto b = random_segmentation(8, 8, 6, rng);
    EXPECT_EQ(ari(a, b), ari(b, a));
    auto ra = relabel(a, rng), rb = relabel(b, rng);
    EXPECT_EQ(ari(ra, rb), ari(a, b));
    auto fa = fg_ari(ra, b), fb = fg_ari(a, b);
    ASSERT_EQ(fa.has_value(), fb.has_value());
    if (fa) {
      EXPECT_EQ(*fa, *fb);
    }
  }
}

TEST(Ari, ShapeMismatchIsRejected) {
  EXPECT_THROW(ari(Segmentation(2, 2, {0, 0, 0, 0}), Segmentation(1, 4, {0, 0, 0, 0})), DimensionError);
}

// ---------------------------------------------------------------------------
// fg-ARI

TEST(FgAri, IdenticalIsOne) {
  std::mt19937_64 rng(7);
  auto s = random_segmentation(8, 8, 4, rng);
  EXPECT_EQ(fg_ari(s, s).value(), 1.0);
}

TEST(FgAri, BackgroundSplitLeavesFgAriAtOne) {
  std::vector<int> g(64, 0), p(64);
  for (std::size_t i = 0; i < 64; ++i) {
    const std::size_t y = i / 8, x = i % 8;
    if (y >= 2 && y < 4 && x >= 2 && x < 4) g[i] = 1;
    if (y >= 5 && x >= 5) g[i] = 2;
    p[i] = g[i] ? g[i] + 10 : static_cast<int>(x % 3);  // arbitrary background pieces
  }
  Segmentation gt(8, 8, g), pred(8, 8, p);
  EXPECT_EQ(fg_ari(pred, gt).value(), 1.0);
  EXPECT_LT(ari(pred, gt), 1.0);
}

TEST(FgAri, NoForegroundIsUndefined) {
  Segmentation gt(2, 2, {0, 0, 0, 0}), pred(2, 2, {0, 1, 2, 3});
  EXPECT_FALSE(fg_ari(pred, gt).has_value());
}

TEST(FgAri, MatchesMaskedOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto pred = random_segmentation(8, 8, 5, rng);
    auto gt = random_segmentation(8, 8, 4, rng);
    std::vector<int> a, b;
    for (std::size_t i = 0; i < 64; ++i)
      if (gt.labels[i] != 0) {
        a.push_back(pred.labels[i]);
        b.push_back(gt.labels[i]);
      }
    EXPECT_NEAR(fg_ari(pred, gt).value(), pair_counting_ari(a, b), 1e-10);
  }
}

// ---------------------------------------------------------------------------
// mIoU

TEST(Miou, IdenticalIsOne) {
  std::mt19937_64 rng(9);
  auto s = random_segmentation(8, 8, 5, rng);
  EXPECT_EQ(miou(s, s), 1.0);
}

TEST(Miou, SingleSegmentAgainstHalfBackground) {
  std::vector<int> g(16, 0);
  std::fill(g.begin() + 8, g.end(), 1);
  EXPECT_EQ(miou(Segmentation(4, 4, std::vector<int>(16, 0)), Segmentation(4, 4, g)), 0.25);
}

TEST(Miou, MatchesPermutationOracle) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    auto pred = random_segmentation(8, 8, 1 + trial % 6, rng);
    auto gt = random_segmentation(8, 8, 1 + (trial / 6) % 6, rng);
    EXPECT_NEAR(miou(pred, gt), brute_force_miou(pred, gt), 1e-10) << "trial " << trial;
  }
}

TEST(Miou, InvariantToPredictedRelabeling) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto pred = random_segmentation(8, 8, 5, rng);
    auto gt = random_segmentation(8, 8, 4, rng);
    EXPECT_EQ(miou(relabel(pred, rng), gt), miou(pred, gt));
  }
}

TEST(Miou, CorrectingAPixelNeverHurts) {
  // Prediction = gt with a few pixels flipped to another label; fixing each
  // flipped pixel back to its gt label is monotone.
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto gt = random_blocks(8, 8, rng);
    Segmentation pred = gt;
    std::uniform_int_distribution<std::size_t> px(0, 63);
    std::vector<std::size_t> flipped;
    for (int k = 0; k < 6; ++k) {
      const std::size_t i = px(rng);
      pred.labels[i] = (gt.labels[i] + 1) % 4;
      flipped.push_back(i);
    }
    double prev = miou(pred, gt);
    for (auto i : flipped) {
      pred.labels[i] = gt.labels[i];
      const double now = miou(pred, gt);
      EXPECT_GE(now, prev - 1e-15);
      prev = now;
    }
    EXPECT_EQ(prev, 1.0);
  }
}

// ---------------------------------------------------------------------------
// aggregation

TEST(Aggregate, OneSeedHasZeroStd) {
  auto r = aggregate_seeds({SeedMetrics{0, 0.7, 0.5, 0.9, 10, 0}});
  EXPECT_EQ(r.ari.mean, 0.7);
  EXPECT_EQ(r.ari.std, 0.0);
  EXPECT_EQ(r.miou.std, 0.0);
}

TEST(Aggregate, TwoSeedsMean) {
  auto r = aggregate_seeds({SeedMetrics{0, 0.4, 0.4, 0.4, 1, 0}, SeedMetrics{1, 0.6, 0.6, 0.6, 1, 0}});
  EXPECT_DOUBLE_EQ(r.ari.mean, 0.5);
  EXPECT_DOUBLE_EQ(r.ari.std, 0.1);  // population estimator
}

TEST(Aggregate, MatchesIndependentRecomputation) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> d(0, 1);
  std::vector<SeedMetrics> seeds;
  for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(SeedMetrics{s, d(rng), d(rng), d(rng), 5, 0});
  auto r = aggregate_seeds(seeds);
  // sqrt(E[x^2] - E[x]^2), accumulated in long double
  auto check = [&](auto get, const MeanStd& got) {
    long double s1 = 0, s2 = 0;
    for (const auto& m : seeds) {
      s1 += get(m);
      s2 += static_cast<long double>(get(m)) * get(m);
    }
    const long double mean = s1 / 10, var = s2 / 10 - mean * mean;
    EXPECT_NEAR(got.mean, static_cast<double>(mean), 1e-12);
    EXPECT_NEAR(got.std, static_cast<double>(std::sqrt(var)), 1e-12);
  };
  check([](const SeedMetrics& m) { return m.ari; }, r.ari);
  check([](const SeedMetrics& m) { return m.miou; }, r.miou);
  check([](const SeedMetrics& m) { return m.fg_ari; }, r.fg_ari);
}

TEST(Aggregate, EmptyIsRejected) { EXPECT_THROW(aggregate_seeds({}), UsageError); }

TEST(Aggregate, SamplesSkipUndefinedFgAri) {
  std::vector<SampleMetrics> s{{1.0, 1.0, 0.5}, {0.0, 0.5, std::nullopt}, {0.5, 0.0, 1.0}};
  auto m = average_samples(s, 4);
  EXPECT_EQ(m.seed, 4u);
  EXPECT_EQ(m.samples, 3u);
  EXPECT_EQ(m.fg_ari_skipped, 1u);
  EXPECT_DOUBLE_EQ(m.fg_ari, 0.75);
  EXPECT_DOUBLE_EQ(m.ari, 0.5);
  EXPECT_DOUBLE_EQ(m.miou, 0.5);
}

TEST(Report, TextAndCsvCarryEverySeed) {
  auto r = aggregate_seeds({SeedMetrics{3, 0.25, 0.5, 0.75, 2, 1}, SeedMetrics{4, 0.5, 0.5, 0.5, 2, 0}}, "wnconv");
  const std::string text = format_report(r);
  EXPECT_NE(text.find("label=wnconv"), std::string::npos);
  EXPECT_NE(text.find("seed=3 ari=0.25 miou=0.5 fg_ari=0.75 samples=2 fg_ari_skipped=1"), std::string::npos);
  EXPECT_NE(text.find("aggregate ari_mean=0.375 ari_std=0.125"), std::string::npos);
  const std::string csv = report_csv({r});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "label,metric,mean,std,seeds");
  EXPECT_NE(csv.find("wnconv,ari,0.375,0.125,2"), std::string::npos);
  EXPECT_NE(csv.find("wnconv,miou,0.5,0,2"), std::string::npos);
}

TEST(Bleeding, ForegroundAriCannotSeeBleedingSegments) {
  const auto c = bleeding_case(16, 16, 3);
  EXPECT_EQ(fg_ari(c.pred, c.gt).value(), 1.0);
  EXPECT_LE(ari(c.pred, c.gt), 0.9);
  EXPECT_LE(miou(c.pred, c.gt), 0.9);
  EXPECT_NEAR(ari(c.pred, c.gt), pair_counting_ari(c.pred.labels, c.gt.labels), 1e-10);
  EXPECT_NEAR(miou(c.pred, c.gt), brute_force_miou(c.pred, c.gt), 1e-10);
}
