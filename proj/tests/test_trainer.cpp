#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <vector>

#include "llbb/ballworld.hpp"
#include "llbb/trainer.hpp"
#include "test_util.hpp"

using namespace llbb;

namespace {

ParamSet<double> scalar_params(std::vector<double> values) {
  ParamSet<double> p;
  p.add("w", {values.size()});
  p[0].data = std::move(values);
  return p;
}

UNetConfig tiny_arch() {
  UNetConfig c;
  c.frames = 5;
  c.resolution = 8;
  c.ch1 = c.ch2 = c.ch3 = 8;
  c.groups = 4;
  c.temb_dim = 8;
  c.temb_hidden = 8;
  return c;
}

TrainConfig tiny_config(Regime r, int N = 2, std::uint64_t steps = 20) {
  TrainConfig c;
  c.regime = r;
  c.batch_size = N;
  c.total_steps = steps;
  c.arch = tiny_arch();
  c.optimizer.lr = 1e-3;
  c.seeds = {3, 4, 5};
  return c;
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir();
    gen_ = generate_stream(6, DatasetVersion::O, 400, dir_->path() / "o8.llvs", 8);
  }
  static void TearDownTestSuite() { delete dir_; }
  VideoStream stream() const { return VideoStream::open(gen_.stream); }
  static inline test::TempDir* dir_ = nullptr;
  static inline GeneratedStream gen_;
};

}  // namespace

TEST(AdamW, ZeroGradientWithoutDecayLeavesParamsUnchanged) {
  auto p = scalar_params({1.0, -2.0, 0.5});
  const auto before = p;
  const auto g = scalar_params({0.0, 0.0, 0.0});
  auto st = OptimizerState<double>::for_params(p);
  AdamWConfig h;
  h.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adamw_update(p, g, st, h);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, MatchesClosedFormOverTwoSteps) {
  AdamWConfig h;
  h.lr = 0.1;
  h.weight_decay = 0.01;
  auto p = scalar_params({1.0});
  auto st = OptimizerState<double>::for_params(p);
  adamw_update(p, scalar_params({0.5}), st, h);
  // First step: bias-corrected moments equal g and g^2.
  const double t1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01 * 1.0;
  EXPECT_NEAR(p[0].data[0], t1, 1e-15);
  adamw_update(p, scalar_params({-1.0}), st, h);
  const double m = 0.9 * 0.05 + 0.1 * -1.0;
  const double v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81);
  const double vhat = v / (1 - 0.999 * 0.999);
  const double t2 = t1 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8) - 0.1 * 0.01 * t1;
  EXPECT_NEAR(p[0].data[0], t2, 1e-14);
}

TEST(AdamW, WeightDecayIsDecoupledFromGradient) {
  AdamWConfig h;
  h.lr = 0.01;
  h.weight_decay = 0.1;
  auto p = scalar_params({2.0, -4.0});
  auto st = OptimizerState<double>::for_params(p);
  adamw_update(p, scalar_params({0.0, 0.0}), st, h);
  EXPECT_DOUBLE_EQ(p[0].data[0], 2.0 * (1 - 0.001));
  EXPECT_DOUBLE_EQ(p[0].data[1], -4.0 * (1 - 0.001));
}

TEST(AdamW, NonFiniteUpdateNamesTheTensor) {
  auto p = scalar_params({1.0});
  auto st = OptimizerState<double>::for_params(p);
  try {
    adamw_update(p, scalar_params({std::numeric_limits<double>::infinity()}), st, AdamWConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos) << e.what();
  }
}

TEST(ClipGradients, ScalesOnlyAboveThreshold) {
  auto small = scalar_params({0.3, 0.4});
  EXPECT_EQ(clip_gradients(small, 1.0), 1.0);
  EXPECT_EQ(small[0].data, (std::vector<double>{0.3, 0.4}));

  auto big = scalar_params({0.0, 2.4, 3.2});
  EXPECT_DOUBLE_EQ(clip_gradients(big, 1.0), 0.25);
  EXPECT_NEAR(std::sqrt(big.squared_norm()), 1.0, 1e-15);
  EXPECT_NEAR(big[0].data[1] / big[0].data[2], 0.75, 1e-15);
  EXPECT_THROW(clip_gradients(big, 0.0), ConfigError);
}

TEST(RegimeNames, RoundTrip) {
  for (auto r : {Regime::Offline, Regime::LifelongNoReplay, Regime::LifelongReplay, Regime::LifelongFullReplay}) {
    EXPECT_EQ(parse_regime(to_string(r)), r);
  }
  EXPECT_THROW(parse_regime("online"), ConfigError);
}

TEST_F(TrainerTest, OfflineStepMatchesHandAssembledStep) {
  const auto s = stream();
  auto cfg = tiny_config(Regime::Offline, 1);
  Trainer tr(cfg, s);
  // Move the output head off zero so every tensor gets a gradient.
  Rng jitter(1);
  for (auto& t : tr.mutable_params())
    for (auto& v : t.data) v += static_cast<float>(0.01 * jitter.normal());
  auto params = tr.params();
  const auto st = tr.step();

  Rng data(mix_seed(cfg.seeds.data, 0));
  Rng noise(mix_seed(cfg.seeds.noise, 0));
  const auto w = sample_offline_window(s, data, cfg.K);
  const auto sch = make_schedule(1000);
  const auto d = draw_noise<float>(noise, sch, 5 * 8 * 8 * 3);
  const UNet<float> net(cfg.arch);
  const auto lg = denoising_loss_at<float>(net, params, w, d.s, d.eps, sch);
  EXPECT_EQ(st.loss, lg.loss);
  auto opt = OptimizerState<float>::for_params(params);
  auto grads = params.zeros_like();
  grads.axpy(1.0f, lg.grads);
  adamw_update(params, grads, opt, cfg.optimizer);
  EXPECT_EQ(tr.params(), params);
}

TEST_F(TrainerTest, NoReplayStepUsesTheCurrentWindow) {
  const auto s = stream();
  auto cfg = tiny_config(Regime::LifelongNoReplay, 1);
  Trainer tr(cfg, s);
  const auto sch = make_schedule(1000);
  Rng noise(mix_seed(cfg.seeds.noise, 0));
  const UNet<float> net(cfg.arch);
  for (std::uint64_t t = 0; t < 3; ++t) {
    const auto params = tr.params();
    const auto d = draw_noise<float>(noise, sch, 5 * 8 * 8 * 3);
    const auto expect = denoising_loss_at<float>(net, params, lifelong_window(s, t), d.s, d.eps, sch).loss;
    EXPECT_EQ(tr.step().loss, expect) << "step " << t;
  }
}

TEST_F(TrainerTest, LargerBatchLowersLossVariance) {
  const auto s = stream();
  auto variance = [&](int N) {
    std::vector<double> losses;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
      auto cfg = tiny_config(Regime::LifelongNoReplay, N);
      cfg.seeds.noise = seed;
      Trainer tr(cfg, s);
      losses.push_back(tr.step().loss);
    }
    const double m = std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
    double v = 0.0;
    for (double l : losses) v += (l - m) * (l - m);
    return v / (losses.size() - 1);
  };
  const double v1 = variance(1), v2 = variance(2);
  EXPECT_LT(v2, 0.8 * v1) << "N=1 " << v1 << " N=2 " << v2;
}

TEST_F(TrainerTest, ReplayMatchesNoReplayUntilTheBufferFills) {
  const auto s = stream();
  Trainer a(tiny_config(Regime::LifelongReplay), s);
  Trainer b(tiny_config(Regime::LifelongNoReplay), s);
  EXPECT_EQ(a.step().loss, b.step().loss);
  EXPECT_EQ(a.params(), b.params());
  ASSERT_TRUE(a.buffer().has_value());
  EXPECT_EQ(a.buffer()->size(), 1u);
  EXPECT_FALSE(b.buffer().has_value());
}

TEST_F(TrainerTest, ReplayLossAveragesCurrentAndReplayedTerms) {
  const auto s = stream();
  auto cfg = tiny_config(Regime::LifelongReplay);
  Trainer tr(cfg, s);
  tr.step();
  const auto params = tr.params();
  const auto st = tr.step();

  const auto sch = make_schedule(1000);
  Rng noise(mix_seed(cfg.seeds.noise, 0));
  const std::size_t n = 5 * 8 * 8 * 3;
  draw_noise<float>(noise, sch, n);
  draw_noise<float>(noise, sch, n);
  const auto d0 = draw_noise<float>(noise, sch, n);
  const auto d1 = draw_noise<float>(noise, sch, n);
  const UNet<float> net(cfg.arch);
  // The buffer holds only window 0 at this point.
  const double l0 = denoising_loss_at<float>(net, params, lifelong_window(s, 1), d0.s, d0.eps, sch).loss;
  const double l1 = denoising_loss_at<float>(net, params, lifelong_window(s, 0), d1.s, d1.eps, sch).loss;
  EXPECT_EQ(st.loss, 0.5 * l0 + 0.5 * l1);
}

TEST_F(TrainerTest, BufferCapacities) {
  const auto s = stream();
  auto replay = tiny_config(Regime::LifelongReplay);
  replay.buffer_fraction = 0.25;
  EXPECT_EQ(Trainer(replay, s).buffer()->capacity(), 10u);
  EXPECT_EQ(Trainer(tiny_config(Regime::LifelongFullReplay), s).buffer()->capacity(), 40u);
}

TEST_F(TrainerTest, EveryRegimeTakesOneUpdatePerStep) {
  const auto s = stream();
  for (auto r : {Regime::Offline, Regime::LifelongNoReplay, Regime::LifelongReplay, Regime::LifelongFullReplay}) {
    Trainer tr(tiny_config(r, 3, 12), s);
    while (!tr.finished()) tr.step();
    EXPECT_EQ(tr.optimizer().step, 12u) << to_string(r);
    EXPECT_EQ(tr.steps_done(), 12u);
  }
  EXPECT_THROW(Trainer(tiny_config(Regime::LifelongReplay, 2, 392), s), ConfigError);
  EXPECT_NO_THROW(Trainer(tiny_config(Regime::LifelongReplay, 2, 391), s));
  EXPECT_NO_THROW(Trainer(tiny_config(Regime::Offline, 2, 5000), s));
  auto wrong_res = tiny_config(Regime::Offline);
  wrong_res.arch.resolution = 16;
  EXPECT_THROW(Trainer(wrong_res, s), ConfigError);
}

TEST_F(TrainerTest, TrainingIsDeterministic) {
  const auto s = stream();
  for (auto r : {Regime::Offline, Regime::LifelongReplay}) {
    Trainer a(tiny_config(r), s), b(tiny_config(r), s);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.step().loss, b.step().loss);
    EXPECT_EQ(a.params(), b.params());
  }
}

TEST_F(TrainerTest, CheckpointRoundTripAndResume) {
  const auto s = stream();
  for (auto r : {Regime::Offline, Regime::LifelongReplay}) {
    const auto ck = dir_->path() / (std::string(to_string(r)) + ".llck");
    Trainer a(tiny_config(r), s);
    for (int i = 0; i < 6; ++i) a.step();
    a.save_checkpoint(ck);
    const auto back = read_checkpoint(ck);
    EXPECT_EQ(back.params, a.params());
    EXPECT_EQ(back.opt, a.optimizer());
    EXPECT_EQ(back.steps_done, 6u);
    EXPECT_EQ(back.buffer, a.buffer());
    while (!a.finished()) a.step();

    Trainer b(tiny_config(r), s);
    b.load_checkpoint(ck);
    EXPECT_EQ(b.steps_done(), 6u);
    while (!b.finished()) b.step();
    EXPECT_EQ(a.params(), b.params()) << to_string(r);
    EXPECT_EQ(a.buffer(), b.buffer());
  }
}

TEST_F(TrainerTest, CheckpointErrors) {
  const auto s = stream();
  const auto ck = dir_->path() / "e.llck";
  Trainer a(tiny_config(Regime::Offline), s);
  a.step();
  a.save_checkpoint(ck);

  auto lr = tiny_config(Regime::Offline);
  lr.optimizer.lr = 5e-4;
  Trainer b(lr, s);
  EXPECT_THROW(b.load_checkpoint(ck), CheckpointError);
  Trainer c(tiny_config(Regime::LifelongReplay), s);
  EXPECT_THROW(c.load_checkpoint(ck), CheckpointError);

  auto bytes = test::read_file(ck);
  bytes[0] = 'X';
  const auto bad = dir_->path() / "bad.llck";
  std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  EXPECT_THROW(read_checkpoint(bad), CheckpointError);
  const auto cut = dir_->path() / "cut.llck";
  std::ofstream(cut, std::ios::binary).write(bytes.data(), 40);
  EXPECT_THROW(read_checkpoint(cut), CheckpointError);
  EXPECT_THROW(read_checkpoint(dir_->path() / "none.llck"), IoError);
}

TEST_F(TrainerTest, ConfigSurvivesJson) {
  auto c = tiny_config(Regime::LifelongFullReplay, 4, 77);
  c.grad_clip = 1.5;
  const auto back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.arch, c.arch);
  EXPECT_EQ(*back.grad_clip, 1.5);
}

TEST(TrainerSmoke, OfflineLossHalvesWithinTwoThousandSteps) {
  test::TempDir dir;
  const auto g = generate_stream(42, DatasetVersion::O, 10000, dir.path() / "o16.llvs", 16);
  const auto s = VideoStream::open(g.stream);
  TrainConfig cfg;
  cfg.regime = Regime::Offline;
  cfg.total_steps = 2000;
  cfg.arch = UNetConfig::reference(10, 16);
  Trainer tr(cfg, s);
  std::vector<double> losses;
  while (!tr.finished()) losses.push_back(tr.step().loss);
  const double first = std::accumulate(losses.begin(), losses.begin() + 50, 0.0) / 50;
  const double last = std::accumulate(losses.end() - 200, losses.end(), 0.0) / 200;
  RecordProperty("loss_ratio", std::to_string(last / first));
  EXPECT_LT(last, 0.5 * first) << "first " << first << " last " << last;
}
