#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "llbb/ballworld.hpp"
#include "llbb/stream_store.hpp"
#include "test_util.hpp"

using namespace llbb;
namespace fs = std::filesystem;

namespace {

// chi-squared 0.999 quantile for 99 degrees of freedom.
constexpr double kChi2Crit99 = 148.2303591651;

class StreamStoreTest : public ::testing::Test {
 protected:
  void SetUp() override { gen_ = generate_stream(21, DatasetVersion::O, 1000, dir_.path() / "s.llvs"); }
  test::TempDir dir_;
  GeneratedStream gen_;
};

}  // namespace

TEST_F(StreamStoreTest, OpenReportsHeader) {
  const auto s = VideoStream::open(gen_.stream);
  EXPECT_EQ(s.frame_count(), 1000u);
  EXPECT_EQ(s.width(), 32);
  EXPECT_EQ(s.height(), 32);
  EXPECT_EQ(s.header().channels, 3);
  EXPECT_EQ(s.header().fps, 10);
  EXPECT_EQ(s.dataset_version(), DatasetVersion::O);
}

TEST_F(StreamStoreTest, TruncatedPayloadNamesBothSizes) {
  const auto bytes = test::read_file(gen_.stream);
  const auto cut = dir_.path() / "cut.llvs";
  {
    std::ofstream f(cut, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
  }
  try {
    VideoStream::open(cut);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(bytes.size())), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(bytes.size() - 100)), std::string::npos) << msg;
  }
}

TEST_F(StreamStoreTest, BadMagicIsAFormatError) {
  auto bytes = test::read_file(gen_.stream);
  bytes[0] = 'X';
  const auto bad = dir_.path() / "bad.llvs";
  std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  EXPECT_THROW(VideoStream::open(bad), FormatError);
  EXPECT_THROW(VideoStream::open(dir_.path() / "missing.llvs"), IoError);
}

TEST_F(StreamStoreTest, MappedAndDirectReadsAgree) {
  const auto m = VideoStream::open(gen_.stream, VideoStream::Access::Mapped);
  const auto d = VideoStream::open(gen_.stream, VideoStream::Access::Direct);
  for (std::uint64_t i : {0u, 1u, 500u, 999u}) {
    EXPECT_EQ(m.read_frame(i), d.read_frame(i));
    EXPECT_EQ(m.read_frame(i), m.read_frame(i));
  }
  EXPECT_THROW(m.read_frame(1000), BoundsError);
}

TEST_F(StreamStoreTest, FirstWindowMatchesRenderedFrames) {
  const auto s = VideoStream::open(gen_.stream);
  const auto w = read_window(s, 0);
  EXPECT_EQ(w.start_index, 0u);
  auto state = init_world(21, DatasetVersion::O, 1000);
  for (int k = 0; k < 10; ++k) {
    const auto f = render_frame(state);
    const auto got = w.frame(k);
    ASSERT_TRUE(std::equal(f.begin(), f.end(), got.begin(), got.end())) << "frame " << k;
    state = step_world(state).first;
  }
}

TEST_F(StreamStoreTest, WindowBoundaries) {
  const auto s = VideoStream::open(gen_.stream);
  EXPECT_NO_THROW(read_window(s, 990));
  EXPECT_THROW(read_window(s, 991), BoundsError);
  EXPECT_THROW(read_window(s, 0, 7), ConfigError);
}

TEST(Window, NormalizationEndpoints) {
  EXPECT_EQ(Window::normalize(255), 1.0f);
  EXPECT_EQ(Window::normalize(0), -1.0f);
  EXPECT_NEAR(Window::normalize(128), 128 / 127.5 - 1.0, 1e-7);
}

TEST_F(StreamStoreTest, LifelongWindowsSlideByOneFrame) {
  const auto s = VideoStream::open(gen_.stream);
  EXPECT_EQ(lifelong_window(s, 0).raw, read_window(s, 0).raw);
  for (std::uint64_t t : {0u, 17u, 989u}) {
    const auto a = lifelong_window(s, t);
    const auto b = lifelong_window(s, t + 1);
    for (int k = 1; k < 10; ++k) {
      const auto fa = a.frame(k);
      const auto fb = b.frame(k - 1);
      ASSERT_TRUE(std::equal(fa.begin(), fa.end(), fb.begin(), fb.end()));
    }
  }
  EXPECT_THROW(lifelong_window(s, 991), BoundsError);
  EXPECT_EQ(lifelong_step_count(1000), 991u);
  EXPECT_EQ(lifelong_step_count(10), 1u);
  EXPECT_EQ(lifelong_step_count(9), 0u);
}

TEST_F(StreamStoreTest, OfflineSamplerIsUniformOverValidStarts) {
  const auto s = VideoStream::open(gen_.stream);
  Rng rng(3);
  const int draws = 100000;
  std::vector<int> counts(991, 0);
  for (int i = 0; i < draws; ++i) ++counts[sample_offline_index(s, rng)];
  const double p = 1.0 / 991.0;
  const double sd = std::sqrt(draws * p * (1 - p));
  for (int c : counts) EXPECT_NEAR(c, draws * p, 4 * sd);

  Rng r1(9), r2(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_offline_window(s, r1).start_index, sample_offline_index(s, r2));
}

TEST(OfflineSampler, ChiSquaredOnHundredIndexStream) {
  test::TempDir dir;
  const auto g = generate_stream(2, DatasetVersion::O, 109, dir.path() / "s.llvs", 8);
  const auto s = VideoStream::open(g.stream);
  Rng rng(17);
  const int draws = 100000;
  std::vector<int> counts(100, 0);
  for (int i = 0; i < draws; ++i) ++counts[sample_offline_index(s, rng)];
  double chi2 = 0.0;
  const double e = draws / 100.0;
  for (int c : counts) chi2 += (c - e) * (c - e) / e;
  EXPECT_LT(chi2, kChi2Crit99);
}

TEST(OfflineSampler, SingleValidIndex) {
  test::TempDir dir;
  const auto g = generate_stream(2, DatasetVersion::O, 10, dir.path() / "s.llvs", 8);
  const auto s = VideoStream::open(g.stream);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_offline_window(s, rng).start_index, 0u);
}

TEST(StreamWriter, FinishChecksFrameCount) {
  test::TempDir dir;
  StreamHeader h;
  h.width = h.height = 8;
  h.frame_count = 3;
  StreamWriter w(dir.path() / "x.llvs", h);
  w.write_frame(std::vector<std::uint8_t>(8 * 8 * 3, 7));
  EXPECT_THROW(w.finish(), Error);
}
