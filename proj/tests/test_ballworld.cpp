#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "llbb/ballworld.hpp"
#include "test_util.hpp"

using namespace llbb;

namespace {

WorldState two_balls(Vec2 p0, Vec2 v0, Vec2 p1, Vec2 v1) {
  WorldState s;
  s.stream_length = 100;
  s.balls[0].pos = p0;
  s.balls[0].vel = v0;
  s.balls[1].pos = p1;
  s.balls[1].vel = v1;
  return s;
}

// Equal masses along the normal: u1' + u2' = P and u1'^2 + u2'^2 = E. The two
// roots are the old value and the post-collision value.
std::array<Vec2, 2> oblique_oracle(Vec2 p0, Vec2 v0, Vec2 p1, Vec2 v1) {
  const Vec2 d = p1 - p0;
  const Vec2 n = d * (1.0 / d.norm());
  const double u0 = v0.dot(n), u1 = v1.dot(n);
  const double P = u0 + u1, E = u0 * u0 + u1 * u1;
  // 2x^2 - 2Px + (P^2 - E) = 0
  const double disc = std::sqrt(4 * P * P - 8 * (P * P - E));
  const double r1 = (2 * P + disc) / 4, r2 = (2 * P - disc) / 4;
  const double u0n = std::abs(r1 - u0) > std::abs(r2 - u0) ? r1 : r2;
  const double u1n = P - u0n;
  return {v0 + n * (u0n - u0), v1 + n * (u1n - u1)};
}

}  // namespace

TEST(InitWorld, DeterministicForEqualSeeds) {
  const auto a = init_world(42, DatasetVersion::O, 1000);
  const auto b = init_world(42, DatasetVersion::O, 1000);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(a.balls[i].pos.x, b.balls[i].pos.x);
    EXPECT_EQ(a.balls[i].pos.y, b.balls[i].pos.y);
    EXPECT_EQ(a.balls[i].vel.x, b.balls[i].vel.x);
    EXPECT_EQ(a.balls[i].vel.y, b.balls[i].vel.y);
    EXPECT_EQ(a.balls[i].color_phase, b.balls[i].color_phase);
  }
}

TEST(InitWorld, PostconditionsOverSeedSweep) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = init_world(seed, DatasetVersion::C, 100);
    EXPECT_GE((s.balls[0].pos - s.balls[1].pos).norm(), 0.30);
    for (const auto& b : s.balls) {
      EXPECT_DOUBLE_EQ(b.radius, 0.15);
      EXPECT_GE(b.pos.x, 0.15);
      EXPECT_LE(b.pos.x, 0.85);
      EXPECT_GE(b.pos.y, 0.15);
      EXPECT_LE(b.pos.y, 0.85);
      EXPECT_LE(b.color_phase, 3);
      const double sp = b.vel.norm();
      EXPECT_GE(sp, 0.03 - 1e-15);
      EXPECT_LE(sp, 0.06 + 1e-15);
    }
  }
}

TEST(InitWorld, SpeedMeanMatchesUniformLaw) {
  // Uniform[0.03, 0.06]: mean 0.045, sd 0.03/sqrt(12).
  double sum = 0.0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = init_world(seed, DatasetVersion::O, 100);
    for (const auto& b : s.balls) {
      sum += b.vel.norm();
      ++n;
    }
  }
  const double sigma_mean = 0.03 / std::sqrt(12.0) / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(sum / n, 0.045, 3 * sigma_mean);
}

TEST(InitWorld, RejectsShortStreamsAndImpossiblePlacement) {
  EXPECT_THROW(init_world(1, DatasetVersion::O, 9), ConfigError);
  WorldConfig cfg;
  cfg.radius = 0.249;
  cfg.max_init_attempts = 50;
  // Two discs of radius 0.249 almost never fit in the unit square by chance.
  EXPECT_THROW(
      {
        for (std::uint64_t seed = 0; seed < 100; ++seed) init_world(seed, DatasetVersion::O, 100, cfg);
      },
      ConfigError);
}

TEST(StepWorld, HeadOnCollisionSwapsVelocities) {
  const auto s = two_balls({0.40, 0.5}, {0.05, 0.0}, {0.70, 0.5}, {-0.05, 0.0});
  const auto [next, events] = step_world(s);
  EXPECT_DOUBLE_EQ(next.balls[0].vel.x, -0.05);
  EXPECT_DOUBLE_EQ(next.balls[1].vel.x, 0.05);
  EXPECT_EQ(next.balls[0].vel.y, 0.0);
  EXPECT_EQ(event_mask(events), kEventBallBall);
  EXPECT_EQ(next.balls[0].color_phase, 1);
  EXPECT_EQ(next.balls[1].color_phase, 1);
  EXPECT_GE((next.balls[0].pos - next.balls[1].pos).norm(), 0.30 - 1e-9);
}

TEST(StepWorld, RightWallReflectsNormalComponent) {
  const auto s = two_balls({0.84, 0.5}, {0.05, 0.02}, {0.2, 0.2}, {0.0, 0.01});
  const auto [next, events] = step_world(s);
  EXPECT_DOUBLE_EQ(next.balls[0].vel.x, -0.05);
  EXPECT_DOUBLE_EQ(next.balls[0].vel.y, 0.02);
  EXPECT_EQ(next.balls[0].color_phase, 1);
  EXPECT_EQ(next.balls[1].color_phase, 0);
  EXPECT_EQ(event_mask(events), kEventBall0Wall);
  EXPECT_LE(next.balls[0].pos.x, 0.85);
}

TEST(StepWorld, ObliqueCollisionMatchesMomentumEnergyOracle) {
  const Vec2 p0{0.40, 0.45}, v0{0.05, 0.01}, p1{0.68, 0.52}, v1{-0.03, -0.02};
  const auto [next, events] = step_world(two_balls(p0, v0, p1, v1));
  ASSERT_EQ(event_mask(events), kEventBallBall);
  const auto expect = oblique_oracle(p0 + v0, v0, p1 + v1, v1);
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(next.balls[i].vel.x, expect[i].x, 1e-12);
    EXPECT_NEAR(next.balls[i].vel.y, expect[i].y, 1e-12);
  }
}

TEST(StepWorld, SimultaneousWallAndBallAdvancesPhaseOnce) {
  // Ball 0 touches the left wall and ball 1 in the same frame.
  const auto s = two_balls({0.16, 0.5}, {-0.03, 0.0}, {0.47, 0.5}, {-0.04, 0.0});
  const auto [next, events] = step_world(s);
  EXPECT_TRUE(event_mask(events) & kEventBallBall);
  EXPECT_TRUE(event_mask(events) & kEventBall0Wall);
  EXPECT_EQ(next.balls[0].color_phase, 1);
  EXPECT_EQ(next.balls[1].color_phase, 1);
}

TEST(StepWorld, LongRunInvariants) {
  auto s = init_world(7, DatasetVersion::O, 100000);
  const double e0 = kinetic_energy(s);
  for (int t = 0; t < 100000; ++t) {
    const auto before = s;
    auto [next, events] = step_world(s);
    s = next;
    ASSERT_GE((s.balls[0].pos - s.balls[1].pos).norm(), 0.30 - 1e-9) << "frame " << t;
    for (const auto& b : s.balls) {
      ASSERT_GE(b.pos.x, b.radius);
      ASSERT_LE(b.pos.x, 1 - b.radius);
      ASSERT_GE(b.pos.y, b.radius);
      ASSERT_LE(b.pos.y, 1 - b.radius);
    }
    ASSERT_NEAR(kinetic_energy(s), e0, 1e-9 * e0);
    const auto mask = event_mask(events);
    if (mask == kEventBallBall) {
      const Vec2 dp = total_momentum(s) - total_momentum(before);
      ASSERT_LT(dp.norm(), 1e-9);
    }
    for (int i = 0; i < 2; ++i) {
      const int d = (s.balls[i].color_phase - before.balls[i].color_phase + 4) % 4;
      ASSERT_LE(d, 1);
    }
  }
}

TEST(Render, VersionCFinalFrameIsFuchsiaForRed) {
  auto s = two_balls({0.3, 0.3}, {0, 0}, {0.7, 0.7}, {0, 0});
  s.version = DatasetVersion::C;
  s.stream_length = 1000;
  s.frame_index = 999;
  s.balls[0].color_phase = 0;  // red
  s.balls[1].color_phase = 1;  // yellow
  const auto f = render_frame(s);
  const auto px = [&](int x, int y) { return &f[(static_cast<std::size_t>(y) * 32 + x) * 3]; };
  const auto* r = px(static_cast<int>(0.3 * 32), static_cast<int>(0.3 * 32));
  EXPECT_EQ(r[0], 255);
  EXPECT_EQ(r[1], 0);
  EXPECT_EQ(r[2], 255);
  const auto* y = px(static_cast<int>(0.7 * 32), static_cast<int>(0.7 * 32));
  EXPECT_EQ(y[0], 255);
  EXPECT_EQ(y[1], 255);
  EXPECT_EQ(y[2], 255);  // white
}

TEST(Render, VersionCFirstFrameEqualsVersionO) {
  auto s = init_world(3, DatasetVersion::O, 500);
  auto c = s;
  c.version = DatasetVersion::C;
  EXPECT_EQ(render_frame(s), render_frame(c));
}

TEST(Render, InteriorGreenPixelAndBlackBackground) {
  auto s = two_balls({0.5, 0.5}, {0, 0}, {0.2, 0.2}, {0, 0});
  s.balls[0].color_phase = 3;  // green
  const auto f = render_frame(s);
  const auto* c = &f[(16 * 32 + 16) * 3];
  EXPECT_EQ(c[0], 0);
  EXPECT_EQ(c[1], 255);
  EXPECT_EQ(c[2], 0);
  const auto* bg = &f[(31 * 32 + 0) * 3];
  EXPECT_EQ(bg[0] | bg[1] | bg[2], 0);
}

TEST(GenerateStream, FileSizeDeterminismAndSidecar) {
  test::TempDir dir;
  const auto a = generate_stream(11, DatasetVersion::O, 1000, dir.path() / "a.llvs");
  const auto b = generate_stream(11, DatasetVersion::O, 1000, dir.path() / "b.llvs");
  EXPECT_EQ(std::filesystem::file_size(a.stream), 32u + 1000u * 32 * 32 * 3);
  EXPECT_EQ(test::read_file(a.stream), test::read_file(b.stream));
  EXPECT_EQ(test::read_file(a.sidecar), test::read_file(b.sidecar));
  EXPECT_EQ(std::filesystem::file_size(a.sidecar), 32u + 1000u * kSidecarRecordBytes);

  const auto sc = read_sidecar(a.sidecar);
  ASSERT_EQ(sc.records.size(), 1000u);
  auto s = init_world(11, DatasetVersion::O, 1000);
  for (std::uint64_t i = 0; i < 1000; ++i) {
    ASSERT_EQ(sc.records[i].balls[0].pos.x, s.balls[0].pos.x);
    ASSERT_EQ(sc.records[i].balls[1].color_phase, s.balls[1].color_phase);
    auto [next, events] = step_world(s);
    if (i + 1 < 1000) {
      ASSERT_EQ(sc.records[i + 1].events, event_mask(events));
    }
    s = next;
  }
}

TEST(GenerateStream, ColorTransitionsFollowTheCycle) {
  test::TempDir dir;
  const auto g = generate_stream(5, DatasetVersion::O, 10000, dir.path() / "s.llvs");
  const auto sc = read_sidecar(g.sidecar);
  int counts[3][3] = {};
  for (std::size_t i = 1; i < sc.records.size(); ++i) {
    for (int k = 0; k < 2; ++k) {
      const auto from = kPhaseColors[sc.records[i - 1].balls[k].color_phase];
      const auto to = kPhaseColors[sc.records[i].balls[k].color_phase];
      if (from != to) ++counts[static_cast<int>(from)][static_cast<int>(to)];
    }
  }
  const int R = 0, Y = 1, G = 2;
  EXPECT_EQ(counts[Y][G], 0);
  EXPECT_EQ(counts[G][Y], 0);
  EXPECT_GT(counts[Y][R], 0);
  EXPECT_GT(counts[G][R], 0);
  const double n = counts[R][Y] + counts[R][G];
  ASSERT_GT(n, 100);
  EXPECT_NEAR(counts[R][Y] / n, 0.5, 4 * std::sqrt(0.25 / n));
}

TEST(GenerateStream, UnwritablePathReportsPath) {
  try {
    generate_stream(1, DatasetVersion::O, 20, "/proc/definitely/not/here.llvs");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/proc/definitely"), std::string::npos);
  }
}
