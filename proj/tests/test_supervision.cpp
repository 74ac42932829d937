// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "occfit/supervision.hpp"

namespace occfit {
namespace {

// A straight trajectory with exactly 1 m between consecutive ego centers.
std::vector<Pose> line_poses(int n) {
  std::vector<Pose> poses;
  for (int i = 0; i < n; ++i)
    poses.push_back(Pose(Mat3{}, Vec3d{-double(i), 0, 0}));
  return poses;
}

TEST(SupervisionSelect, ZeroProbabilityAlwaysReturnsCurrentFrame) {
  SupervisionConfig cfg;
  cfg.p = 0.0;
  std::mt19937_64 rng(1);
  auto poses = line_poses(10);
  for (int i = 0; i < 1000; ++i)
    EXPECT_EQ(select_supervision_frame(4, poses, cfg, rng), 4u);
}

TEST(SupervisionSelect, SingleWindowFrameIsCertainUnderProbabilityOne) {
  SupervisionConfig cfg;
  cfg.p = 1.0;
  cfg.l1 = 1.5;
  cfg.l2 = 2.5;  // only distance-2 frames qualify
  cfg.ratio[1] = 0.0;  // disable the earlier side: frame t+2 remains
  std::mt19937_64 rng(2);
  auto poses = line_poses(5);
  for (int i = 0; i < 1000; ++i)
    EXPECT_EQ(select_supervision_frame(0, poses, cfg, rng), 2u);
}

TEST(SupervisionSelect, WindowSupportMatchesDistanceBand) {
  // 1 m spacing, window [2, 4] → only t±2..t±4 are ever selected.
  SupervisionConfig cfg;
  cfg.p = 1.0;
  cfg.l1 = 2.0;
  cfg.l2 = 4.0;
  std::mt19937_64 rng(3);
  auto poses = line_poses(21);
  const size_t t = 10;
  std::set<size_t> seen;
  for (int i = 0; i < 10000; ++i)
    seen.insert(select_supervision_frame(t, poses, cfg, rng));
  std::set<size_t> expected{6, 7, 8, 12, 13, 14};
  EXPECT_EQ(seen, expected);
}

TEST(SupervisionSelect, CurrentOnlyRatioReproducesCurrentFrameSupervision) {
  SupervisionConfig cfg;
  cfg.p = 1.0;
  cfg.ratio[0] = 1.0;
  cfg.ratio[1] = 0.0;
  cfg.ratio[2] = 0.0;
  std::mt19937_64 rng(4);
  auto poses = line_poses(10);
  for (int i = 0; i < 1000; ++i)
    EXPECT_EQ(select_supervision_frame(5, poses, cfg, rng), 5u);
}

TEST(SupervisionSelect, EveryDrawSatisfiesWindowOrFallback) {
  SupervisionConfig cfg;
  cfg.p = 0.7;
  cfg.l1 = 1.0;
  cfg.l2 = 3.0;
  std::mt19937_64 rng(5);
  auto poses = line_poses(12);
  for (int i = 0; i < 5000; ++i) {
    size_t t = size_t(i) % poses.size();
    size_t got = select_supervision_frame(t, poses, cfg, rng);
    if (got == t) continue;  // fallback or p-branch
    double d = std::abs(double(got) - double(t));
    EXPECT_GE(d, cfg.l1);
    EXPECT_LE(d, cfg.l2);
  }
}

TEST(SupervisionSelect, EmptyWindowFallsBackToCurrent) {
  SupervisionConfig cfg;
  cfg.p = 1.0;
  cfg.l1 = 100.0;
  cfg.l2 = 200.0;  // nothing is that far away
  std::mt19937_64 rng(6);
  auto poses = line_poses(5);
  for (int i = 0; i < 100; ++i)
    EXPECT_EQ(select_supervision_frame(2, poses, cfg, rng), 2u);
}

TEST(SupervisionSelect, ValidatesConfigAndFrameIndex) {
  std::mt19937_64 rng(7);
  auto poses = line_poses(5);
  SupervisionConfig bad_p;
  bad_p.p = 1.5;
  EXPECT_THROW(select_supervision_frame(0, poses, bad_p, rng), ConfigError);
  SupervisionConfig bad_window;
  bad_window.l1 = 3.0;
  bad_window.l2 = 2.0;
  EXPECT_THROW(select_supervision_frame(0, poses, bad_window, rng),
               ConfigError);
  SupervisionConfig bad_ratio;
  bad_ratio.ratio[0] = bad_ratio.ratio[1] = bad_ratio.ratio[2] = 0.0;
  EXPECT_THROW(select_supervision_frame(0, poses, bad_ratio, rng),
               ConfigError);
  SupervisionConfig ok;
  EXPECT_THROW(select_supervision_frame(99, poses, ok, rng), DomainError);
}

TEST(SampleRayBatch, FullBatchCoversEveryPixelExactlyOnce) {
  std::mt19937_64 rng(8);
  auto batch = sample_ray_batch(8, 6, 48, rng);
  ASSERT_EQ(batch.size(), 48u);
  std::set<std::pair<int, int>> seen;
  for (const Vec2d& px : batch)
    seen.insert({int(px.x), int(px.y)});
  EXPECT_EQ(seen.size(), 48u);
  for (const auto& [x, y] : seen) {
    EXPECT_GE(x, 0);
    EXPECT_LT(x, 8);
    EXPECT_GE(y, 0);
    EXPECT_LT(y, 6);
  }
}

TEST(SampleRayBatch, DistinctPixelsWithinEveryBatch) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    auto batch = sample_ray_batch(16, 16, 100, rng);
    std::set<std::pair<int, int>> seen;
    for (const Vec2d& px : batch) seen.insert({int(px.x), int(px.y)});
    EXPECT_EQ(seen.size(), batch.size());
  }
}

TEST(SampleRayBatch, FixedSeedReproducesTheBatch) {
  std::mt19937_64 a(10), b(10);
  auto ba = sample_ray_batch(32, 32, 64, a);
  auto bb = sample_ray_batch(32, 32, 64, b);
  ASSERT_EQ(ba.size(), bb.size());
  for (size_t i = 0; i < ba.size(); ++i) {
    EXPECT_EQ(ba[i].x, bb[i].x);
    EXPECT_EQ(ba[i].y, bb[i].y);
  }
}

TEST(SampleRayBatch, ChiSquareUniformityOnThirtyTwoSquare) {
  // 10^5 single-pixel draws over a 32x32 image; chi-square with 1023 degrees
  // of freedom at the 1% level (critical value ~1131.16).
  std::mt19937_64 rng(11);
  std::vector<size_t> hits(1024, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto batch = sample_ray_batch(32, 32, 1, rng);
    ++hits[size_t(batch[0].y) * 32 + size_t(batch[0].x)];
  }
  double expected = double(draws) / 1024.0;
  double chi2 = 0;
  for (size_t h : hits) {
    double d = double(h) - expected;
    chi2 += d * d / expected;
  }
  EXPECT_LT(chi2, 1131.16);
}

TEST(SampleRayBatch, RejectsOversizedAndEmptyRequests) {
  std::mt19937_64 rng(12);
  EXPECT_THROW(sample_ray_batch(4, 4, 17, rng), DomainError);
  EXPECT_THROW(sample_ray_batch(4, 4, 0, rng), DomainError);
}

TEST(SupervisionSelect, EligibilityListExcludesReservedFrames) {
  SupervisionConfig cfg;
  cfg.p = 1.0;
  cfg.l1 = 0.5;
  cfg.l2 = 3.5;
  auto poses = line_poses(8);
  std::vector<size_t> eligible{0, 1, 2, 4, 6, 7};  // 3 and 5 reserved
  std::mt19937_64 rng(14);
  std::vector<int> seen(8, 0);
  for (int i = 0; i < 4000; ++i) {
    size_t pick = select_supervision_frame(
        4, poses, cfg, rng, std::span<const size_t>(eligible));
    ++seen[pick];
  }
  EXPECT_EQ(seen[3], 0);
  EXPECT_EQ(seen[5], 0);
  // the remaining window frames still get selected
  EXPECT_GT(seen[1], 0);
  EXPECT_GT(seen[2], 0);
  EXPECT_GT(seen[6], 0);
  EXPECT_GT(seen[7], 0);
}

}  // namespace
}  // namespace occfit
