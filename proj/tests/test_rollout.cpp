#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <vector>

#include "llbb/rollout.hpp"
#include "test_util.hpp"

using namespace llbb;

namespace {

std::vector<float> normalized_frames(const VideoStream& s) {
  std::vector<float> out;
  for (std::uint64_t i = 0; i < s.frame_count(); ++i)
    for (auto b : s.read_frame(i)) out.push_back(Window::normalize(b));
  return out;
}

// Denoiser that knows the stream: it locates the conditioning frames in the
// stream and predicts the noise that leads to the frames that follow them.
DenoiseFn<float> stream_oracle(const std::vector<float>& frames, std::size_t frame_values, const NoiseSchedule& sch) {
  return [&frames, frame_values, &sch](std::span<const float> obs, std::span<const float> lat_s, int s) {
    const std::size_t n = obs.size();
    const std::size_t total = frames.size() / frame_values;
    const std::size_t half = n / frame_values;
    std::size_t found = total;
    for (std::size_t j = 0; j + 2 * half <= total && found == total; ++j) {
      bool match = true;
      for (std::size_t i = 0; i < n && match; ++i) match = std::abs(frames[j * frame_values + i] - obs[i]) < 1e-3f;
      if (match) found = j;
    }
    if (found == total) throw ContractError("oracle: conditioning frames not found in the stream");
    const float* x0 = frames.data() + (found + half) * frame_values;
    const double sig = sch.sigma[s];
    std::vector<float> eps(n);
    for (std::size_t i = 0; i < n; ++i) {
      eps[i] = static_cast<float>((lat_s[i] * std::sqrt(1 + sig * sig) - x0[i]) / sig);
    }
    return eps;
  };
}

DenoiseFn<float> constant_stub(float c) {
  return [c](std::span<const float>, std::span<const float> x, int) { return std::vector<float>(x.size(), c); };
}

SamplerConfig quick_sampler(int steps = 4) {
  SamplerConfig c;
  c.n_steps = steps;
  return c;
}

class RolloutTest : public ::testing::Test {
 protected:
  void SetUp() override {
    gen_ = generate_stream(31, DatasetVersion::C, 160, dir_.path() / "c.llvs");
    stream_ = std::make_unique<VideoStream>(VideoStream::open(gen_.stream));
    truth_ = read_sidecar(gen_.sidecar);
    frames_ = normalized_frames(*stream_);
  }
  test::TempDir dir_;
  GeneratedStream gen_;
  std::unique_ptr<VideoStream> stream_;
  Sidecar truth_;
  std::vector<float> frames_;
  NoiseSchedule sch_ = make_schedule(1000);
};

}  // namespace

TEST_F(RolloutTest, SingleRoundShapeAndProvenance) {
  Rng rng(1);
  const auto r = autoregressive_rollout(constant_stub(0.0f), *stream_, 7, 1, 10, sch_, quick_sampler(), rng);
  EXPECT_EQ(r.start_index, 7u);
  EXPECT_EQ(r.frames_per_round, 5);
  EXPECT_EQ(r.generated_frames(), 5u);
  ASSERT_EQ(r.rounds.size(), 1u);
  EXPECT_TRUE(r.rounds[0].ground_truth);
  EXPECT_EQ(r.rounds[0].first, 7u);
  EXPECT_EQ(r.rounds[0].count, 5);
  EXPECT_EQ(r.target_index(0), 12u);
  const std::size_t fv = r.frame_values();
  for (std::size_t i = 0; i < 5 * fv; ++i) ASSERT_EQ(r.conditioning[i], frames_[7 * fv + i]);
}

TEST_F(RolloutTest, LaterRoundsConditionOnPreviousOutputs) {
  std::vector<std::vector<float>> seen;
  DenoiseFn<float> recorder = [&seen](std::span<const float> obs, std::span<const float> x, int) {
    if (seen.empty() || !std::equal(obs.begin(), obs.end(), seen.back().begin(), seen.back().end())) {
      seen.emplace_back(obs.begin(), obs.end());
    }
    std::vector<float> e(x.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = 0.1f * x[i];
    return e;
  };
  Rng rng(2);
  const auto r = autoregressive_rollout(recorder, *stream_, 0, 3, 10, sch_, quick_sampler(), rng);
  ASSERT_EQ(r.rounds.size(), 3u);
  EXPECT_FALSE(r.rounds[1].ground_truth);
  EXPECT_EQ(r.rounds[1].first, 0u);
  EXPECT_EQ(r.rounds[2].first, 5u);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_EQ(seen[0], r.conditioning);
  const std::size_t half = 5 * r.frame_values();
  for (int k = 1; k < 3; ++k) {
    const std::vector<float> prev(r.generated.begin() + (k - 1) * half, r.generated.begin() + k * half);
    EXPECT_EQ(seen[k], prev) << "round " << k;
  }
}

TEST_F(RolloutTest, DeterministicPerSeed) {
  DenoiseFn<float> stub = [](std::span<const float>, std::span<const float> x, int s) {
    std::vector<float> e(x.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = 0.3f * x[i] + 1e-4f * static_cast<float>(s);
    return e;
  };
  Rng a(3), b(3), c(4);
  const auto ra = autoregressive_rollout(stub, *stream_, 10, 2, 10, sch_, quick_sampler(), a);
  EXPECT_EQ(ra.generated, autoregressive_rollout(stub, *stream_, 10, 2, 10, sch_, quick_sampler(), b).generated);
  EXPECT_NE(ra.generated, autoregressive_rollout(stub, *stream_, 10, 2, 10, sch_, quick_sampler(), c).generated);
}

TEST_F(RolloutTest, OracleDenoiserReproducesTheStream) {
  const auto oracle = stream_oracle(frames_, stream_->header().frame_bytes(), sch_);
  Rng rng(5);
  const auto r = autoregressive_rollout(oracle, *stream_, 20, 9, 10, sch_, quick_sampler(), rng);
  ASSERT_EQ(r.generated_frames(), 45u);
  const std::size_t fv = r.frame_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < r.generated.size(); ++i) {
    worst = std::max(worst, double(std::abs(r.generated[i] - frames_[25 * fv + i])));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST_F(RolloutTest, OracleRolloutsScoreLikeGroundTruth) {
  const auto oracle = stream_oracle(frames_, stream_->header().frame_bytes(), sch_);
  RolloutEvalConfig cfg;
  cfg.sampler = quick_sampler();
  cfg.trajectories = 2;
  // 150 cannot fit a 50-frame rollout and is skipped.
  const auto res = evaluate_rollouts(oracle, *stream_, truth_, {60, 0, 150, 30}, sch_, cfg, 9);
  EXPECT_EQ(res.windows, (std::vector<std::uint64_t>{0, 30, 60}));
  ASSERT_EQ(res.min_ade.size(), 3u);
  for (double a : res.min_ade) EXPECT_LE(a, 0.5);

  // Tally of the same generated spans taken straight from the stream.
  TransitionTally expect;
  for (std::uint64_t w : res.windows) {
    std::vector<std::vector<BallObservation>> obs;
    for (std::uint64_t i = w + 5; i < w + 50; ++i) obs.push_back(extract_balls(stream_->read_frame(i), 32));
    const auto t = tally_transitions(obs, transition_max_jump(32));
    expect += t;
    expect += t;
  }
  EXPECT_EQ(res.tally.counts, expect.counts);
  if (expect.total() > 0) {
    EXPECT_DOUBLE_EQ(res.color_kl, color_kl(expect));
  } else {
    EXPECT_TRUE(std::isnan(res.color_kl));
  }
}

TEST_F(RolloutTest, OutputsAreClampedToUnitRange) {
  Rng rng(6);
  const auto r = autoregressive_rollout(constant_stub(-50.0f), *stream_, 0, 2, 10, sch_, quick_sampler(), rng);
  bool hit_edge = false;
  for (float v : r.generated) {
    ASSERT_GE(v, -1.0f);
    ASSERT_LE(v, 1.0f);
    hit_edge = hit_edge || std::abs(v) == 1.0f;
  }
  EXPECT_TRUE(hit_edge);
}

TEST_F(RolloutTest, ErrorsCarryContext) {
  Rng rng(7);
  EXPECT_THROW(autoregressive_rollout(constant_stub(0.0f), *stream_, 156, 1, 10, sch_, quick_sampler(), rng),
               BoundsError);
  EXPECT_THROW(autoregressive_rollout(constant_stub(0.0f), *stream_, 0, 0, 10, sch_, quick_sampler(), rng),
               ConfigError);
  try {
    autoregressive_rollout(constant_stub(std::numeric_limits<float>::quiet_NaN()), *stream_, 0, 2, 10, sch_,
                           quick_sampler(), rng);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("round 0"), std::string::npos) << e.what();
  }
}

TEST(ToBytes, MapsUnitRangeOntoBytes) {
  const std::vector<float> v{-1.0f, 1.0f, 0.0f, 2.0f, -3.0f, 0.2f};
  EXPECT_EQ(to_bytes(v), (std::vector<std::uint8_t>{0, 255, 128, 255, 0, 153}));
}

TEST(EvalNoiseLevels, TenEvenlySpacedTimesteps) {
  EXPECT_EQ(eval_noise_levels(make_schedule(1000)), (std::vector<int>{100, 200, 300, 400, 500, 600, 700, 800, 900, 1000}));
  EXPECT_EQ(eval_noise_levels(make_schedule(15)), (std::vector<int>{2, 3, 5, 6, 8, 9, 11, 12, 14, 15}));
}

TEST(SelectEvalWindows, FirstAndEvenlySpaced) {
  EXPECT_EQ(select_eval_windows(1000, WindowSelection::FirstN, 3), (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(select_eval_windows(1000, WindowSelection::EvenlySpaced, 5),
            (std::vector<std::uint64_t>{0, 248, 495, 743, 990}));
  EXPECT_EQ(select_eval_windows(1000, WindowSelection::EvenlySpaced, 1), (std::vector<std::uint64_t>{0}));
  EXPECT_EQ(select_eval_windows(1000, WindowSelection::EvenlySpaced, 991).size(), 991u);
  EXPECT_THROW(select_eval_windows(1000, WindowSelection::FirstN, 992), BoundsError);
  EXPECT_THROW(select_eval_windows(1000, WindowSelection::FirstN, 0), ConfigError);
  EXPECT_EQ(default_selection(DatasetVersion::O), WindowSelection::FirstN);
  EXPECT_EQ(default_selection(DatasetVersion::C), WindowSelection::EvenlySpaced);
}

TEST(EvalLoss, PerfectPredictorOnBlackStreamIsZero) {
  test::TempDir dir;
  StreamHeader h;
  h.width = h.height = 8;
  h.frame_count = 30;
  {
    StreamWriter w(dir.path() / "black.llvs", h);
    for (int i = 0; i < 30; ++i) w.write_frame(std::vector<std::uint8_t>(8 * 8 * 3, 0));
    w.finish();
  }
  const auto s = VideoStream::open(dir.path() / "black.llvs");
  const auto sch = make_schedule(1000);
  DenoiseFn<float> perfect = [&sch](std::span<const float>, std::span<const float> lat_s, int t) {
    const double a = std::sqrt(sch.alpha_bar[t]), b = std::sqrt(1 - sch.alpha_bar[t]);
    std::vector<float> e(lat_s.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>((lat_s[i] + a) / b);
    return e;
  };
  const auto r = eval_loss(perfect, s, select_eval_windows(30, WindowSelection::FirstN, 21), sch, 0);
  EXPECT_LT(r.mean, 1e-6);
}

class EvalLossStream : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir();
    gen_ = generate_stream(8, DatasetVersion::O, 1009, dir_->path() / "o8.llvs", 8);
  }
  static void TearDownTestSuite() { delete dir_; }
  static inline test::TempDir* dir_ = nullptr;
  static inline GeneratedStream gen_;
};

TEST_F(EvalLossStream, ZeroPredictorScoresNoiseVariance) {
  const auto s = VideoStream::open(gen_.stream);
  const auto r = eval_loss(constant_stub(0.0f), s, select_eval_windows(1009, WindowSelection::FirstN, 1000),
                           make_schedule(1000), 3);
  EXPECT_NEAR(r.mean, 1.0, 0.05);
  EXPECT_EQ(r.per_window.size(), 1000u);
}

TEST_F(EvalLossStream, SeedDeterminesResultRegardlessOfOrderOrWorkers) {
  const auto s = VideoStream::open(gen_.stream);
  const auto sch = make_schedule(1000);
  DenoiseFn<float> stub = [](std::span<const float> obs, std::span<const float> x, int) {
    std::vector<float> e(x.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = 0.5f * x[i] - 0.2f * obs[i];
    return e;
  };
  const std::vector<std::uint64_t> fwd{3, 10, 400, 999, 57};
  std::vector<std::uint64_t> rev(fwd.rbegin(), fwd.rend());
  ::setenv("LLVS_THREADS", "1", 1);
  const auto a = eval_loss(stub, s, fwd, sch, 11);
  ::setenv("LLVS_THREADS", "3", 1);
  const auto b = eval_loss(stub, s, rev, sch, 11);
  ::unsetenv("LLVS_THREADS");
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.per_window, b.per_window);
  EXPECT_EQ(a.windows, (std::vector<std::uint64_t>{3, 10, 57, 400, 999}));
  // A window's score does not depend on which other windows are evaluated.
  EXPECT_EQ(eval_loss(stub, s, {400}, sch, 11).per_window[0], a.per_window[3]);
  EXPECT_NE(eval_loss(stub, s, fwd, sch, 12).mean, a.mean);
  EXPECT_THROW(eval_loss(stub, s, {}, sch, 11), ConfigError);
}
