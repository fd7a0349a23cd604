#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "llbb/binary_io.hpp"
#include "llbb/checkpoint.hpp"
#include "llbb/diffusion.hpp"
#include "llbb/errors.hpp"
#include "llbb/optim.hpp"
#include "llbb/parallel.hpp"
#include "llbb/replay_buffer.hpp"
#include "llbb/rng.hpp"
#include "llbb/stream_store.hpp"
#include "llbb/unet.hpp"

namespace llbb {

enum class Regime { Offline, LifelongNoReplay, LifelongReplay, LifelongFullReplay };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::Offline: return "offline";
    case Regime::LifelongNoReplay: return "no-replay";
    case Regime::LifelongReplay: return "replay";
    case Regime::LifelongFullReplay: return "full-replay";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "offline") return Regime::Offline;
  if (s == "no-replay" || s == "noreplay" || s == "lifelong-no-replay") return Regime::LifelongNoReplay;
  if (s == "replay" || s == "experience-replay" || s == "lifelong-replay") return Regime::LifelongReplay;
  if (s == "full-replay" || s == "fullreplay") return Regime::LifelongFullReplay;
  throw ConfigError("unknown regime '" + s + "' (expected offline, no-replay, replay, full-replay)");
}

inline bool is_lifelong(Regime r) { return r != Regime::Offline; }
inline bool uses_buffer(Regime r) { return r == Regime::LifelongReplay || r == Regime::LifelongFullReplay; }

struct TrainSeeds {
  std::uint64_t init = 0;
  std::uint64_t data = 1;
  std::uint64_t noise = 2;
  bool operator==(const TrainSeeds&) const = default;
};

struct TrainConfig {
  Regime regime = Regime::Offline;
  int batch_size = 2;
  std::uint64_t total_steps = 1000;
  int K = kDefaultContext;
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  UNetConfig arch = UNetConfig::reference();
  AdamWConfig optimizer;
  std::optional<double> grad_clip;
  double buffer_fraction = 0.05;
  TrainSeeds seeds;
  std::uint64_t checkpoint_every = 0;
  std::uint64_t eval_every = 0;

  // Fraction actually used by the buffer; full replay keeps the whole stream's worth.
  double effective_buffer_fraction() const {
    return regime == Regime::LifelongFullReplay ? 1.0 : buffer_fraction;
  }

  void validate(std::uint64_t frame_count) const {
    validate_context(K);
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (total_steps < 1) throw ConfigError("total steps must be >= 1");
    if (arch.frames != K / 2) throw ConfigError("denoiser frames must equal K/2");
    arch.validate();
    if (uses_buffer(regime) && !(effective_buffer_fraction() > 0.0 && effective_buffer_fraction() <= 1.0)) {
      throw ConfigError("buffer fraction must lie in (0, 1]");
    }
    if (is_lifelong(regime) && total_steps > lifelong_step_count(frame_count, K)) {
      throw ConfigError("lifelong regimes can run at most frames-K+1 = " +
                        std::to_string(lifelong_step_count(frame_count, K)) + " steps, requested " +
                        std::to_string(total_steps));
    }
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad clip threshold must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["regime"] = to_string(c.regime);
  j["batch_size"] = c.batch_size;
  j["total_steps"] = c.total_steps;
  j["K"] = c.K;
  j["diffusion_steps"] = c.diffusion_steps;
  j["beta_start"] = c.beta_start;
  j["beta_end"] = c.beta_end;
  j["arch"] = {{"frames", c.arch.frames},       {"resolution", c.arch.resolution}, {"ch1", c.arch.ch1},
               {"ch2", c.arch.ch2},             {"ch3", c.arch.ch3},               {"groups", c.arch.groups},
               {"temb_dim", c.arch.temb_dim}, {"temb_hidden", c.arch.temb_hidden}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  j["grad_clip"] = c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr);
  j["buffer_fraction"] = c.buffer_fraction;
  j["seeds"] = {{"init", c.seeds.init}, {"data", c.seeds.data}, {"noise", c.seeds.noise}};
  j["checkpoint_every"] = c.checkpoint_every;
  j["eval_every"] = c.eval_every;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.regime = parse_regime(j.at("regime").get<std::string>());
  c.batch_size = j.at("batch_size").get<int>();
  c.total_steps = j.at("total_steps").get<std::uint64_t>();
  c.K = j.at("K").get<int>();
  c.diffusion_steps = j.at("diffusion_steps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  const auto& a = j.at("arch");
  c.arch.frames = a.at("frames").get<int>();
  c.arch.resolution = a.at("resolution").get<int>();
  c.arch.ch1 = a.at("ch1").get<int>();
  c.arch.ch2 = a.at("ch2").get<int>();
  c.arch.ch3 = a.at("ch3").get<int>();
  c.arch.groups = a.at("groups").get<int>();
  c.arch.temb_dim = a.at("temb_dim").get<int>();
  c.arch.temb_hidden = a.at("temb_hidden").get<int>();
  const auto& o = j.at("optimizer");
  c.optimizer.lr = o.at("lr").get<double>();
  c.optimizer.weight_decay = o.at("weight_decay").get<double>();
  c.optimizer.beta1 = o.at("beta1").get<double>();
  c.optimizer.beta2 = o.at("beta2").get<double>();
  c.optimizer.eps = o.at("eps").get<double>();
  if (!j.at("grad_clip").is_null()) c.grad_clip = j.at("grad_clip").get<double>();
  c.buffer_fraction = j.at("buffer_fraction").get<double>();
  const auto& s = j.at("seeds");
  c.seeds = {s.at("init").get<std::uint64_t>(), s.at("data").get<std::uint64_t>(), s.at("noise").get<std::uint64_t>()};
  c.checkpoint_every = j.at("checkpoint_every").get<std::uint64_t>();
  c.eval_every = j.at("eval_every").get<std::uint64_t>();
  return c;
}

struct StepStats {
  std::uint64_t step = 0;  // index of the step just taken (0-based)
  double loss = 0.0;
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

// Everything needed to resume training bit-exactly.
struct CheckpointData {
  TrainConfig config;
  ParamSet<float> params;
  OptimizerState<float> opt;
  std::uint64_t steps_done = 0;
  std::string data_rng;
  std::string noise_rng;
  std::optional<ReplayBuffer> buffer;
};

inline void write_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(tmp.string() + ": cannot open for writing");
    write_params_section(os, ck.params);
    io::put_magic(os, "LLOP");
    io::put<std::uint64_t>(os, ck.opt.step);
    write_tensor_records(os, ck.opt.m);
    write_tensor_records(os, ck.opt.v);
    io::put_magic(os, "LLTS");
    io::put<std::uint64_t>(os, ck.steps_done);
    io::put_magic(os, "LLRG");
    io::put_string(os, ck.data_rng);
    io::put_string(os, ck.noise_rng);
    io::put<std::uint8_t>(os, ck.buffer ? 1 : 0);
    if (ck.buffer) ck.buffer->serialize(os);
    io::put_magic(os, "LLCF");
    io::put_string(os, to_json(ck.config).dump());
    os.flush();
    if (!os) throw IoError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open checkpoint");
  CheckpointData ck;
  try {
    ck.params = read_params_section(is);
    io::expect_magic(is, "LLOP");
    ck.opt.step = io::get<std::uint64_t>(is, "optimizer step");
    ck.opt.m = read_tensor_records(is);
    ck.opt.v = read_tensor_records(is);
    io::expect_magic(is, "LLTS");
    ck.steps_done = io::get<std::uint64_t>(is, "trainer step");
    io::expect_magic(is, "LLRG");
    ck.data_rng = io::get_string(is, "data rng");
    ck.noise_rng = io::get_string(is, "noise rng");
    if (io::get<std::uint8_t>(is, "buffer flag") != 0) ck.buffer = ReplayBuffer::deserialize(is);
    io::expect_magic(is, "LLCF");
    ck.config = train_config_from_json(nlohmann::json::parse(io::get_string(is, "config")));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad config echo: " + e.what());
  }
  if (!ck.params.same_layout(ck.opt.m) || !ck.params.same_layout(ck.opt.v)) {
    throw CheckpointError(path.string() + ": optimizer moments do not match parameters");
  }
  return ck;
}

// Runs one of the four training regimes over a frame stream. Every regime
// performs exactly one AdamW update per step on a batch of N loss terms.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const VideoStream& stream)
      : cfg_(cfg),
        stream_(stream),
        net_(cfg.arch),
        schedule_(make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)),
        data_rng_(mix_seed(cfg.seeds.data, 0)),
        noise_rng_(mix_seed(cfg.seeds.noise, 0)) {
    cfg_.validate(stream.frame_count());
    if (stream.width() != cfg_.arch.resolution || stream.height() != cfg_.arch.resolution) {
      throw ConfigError("stream is " + std::to_string(stream.width()) + "x" + std::to_string(stream.height()) +
                        " but the denoiser expects " + std::to_string(cfg_.arch.resolution) + "^2");
    }
    Rng init_rng(mix_seed(cfg.seeds.init, 0));
    params_ = net_.init_params(init_rng);
    opt_ = OptimizerState<float>::for_params(params_);
    if (uses_buffer(cfg_.regime)) {
      buffer_.emplace(cfg_.effective_buffer_fraction(), stream.frame_count(), cfg_.K, mix_seed(cfg.seeds.data, 1));
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const UNet<float>& net() const { return net_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const ParamSet<float>& params() const { return params_; }
  ParamSet<float>& mutable_params() { return params_; }
  const OptimizerState<float>& optimizer() const { return opt_; }
  const std::optional<ReplayBuffer>& buffer() const { return buffer_; }
  std::uint64_t steps_done() const { return t_; }
  bool finished() const { return t_ >= cfg_.total_steps; }

  StepStats step() {
    std::vector<Window> batch;
    switch (cfg_.regime) {
      case Regime::Offline: batch = offline_batch(); break;
      case Regime::LifelongNoReplay: batch = lifelong_batch(); break;
      case Regime::LifelongReplay:
      case Regime::LifelongFullReplay: batch = replay_batch(); break;
    }
    const std::size_t n = batch.size();
    std::vector<NoiseDraw<float>> draws;
    draws.reserve(n);
    for (std::size_t b = 0; b < n; ++b) draws.push_back(draw_noise<float>(noise_rng_, schedule_, latent_size()));

    std::vector<LossAndGrad<float>> terms(n);
    parallel_for(n, [&](std::size_t b) {
      terms[b] = denoising_loss_at<float>(net_, params_, batch[b], draws[b].s, draws[b].eps, schedule_);
    });

    // Equal 1/N weights, summed in batch order.
    ParamSet<float> grads = params_.zeros_like();
    StepStats st;
    st.step = t_;
    const double w = 1.0 / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
      grads.axpy(static_cast<float>(w), terms[b].grads);
      st.loss += w * terms[b].loss;
    }
    if (buffer_) buffer_->offer(batch.front());
    st.grad_norm = std::sqrt(grads.squared_norm());
    if (cfg_.grad_clip) st.clip_scale = clip_gradients(grads, *cfg_.grad_clip);
    adamw_update(params_, grads, opt_, cfg_.optimizer);
    ++t_;
    return st;
  }

  CheckpointData snapshot() const {
    return {cfg_, params_, opt_, t_, data_rng_.to_string(), noise_rng_.to_string(), buffer_};
  }

  void save_checkpoint(const std::filesystem::path& path) const { write_checkpoint(path, snapshot()); }

  // Restores state from a checkpoint written by a run with the same config
  // (total_steps and cadences may differ).
  void load_checkpoint(const std::filesystem::path& path) { restore(read_checkpoint(path)); }

  void restore(CheckpointData ck) {
    auto a = to_json(ck.config);
    auto b = to_json(cfg_);
    for (auto* j : {&a, &b}) {
      j->erase("total_steps");
      j->erase("checkpoint_every");
      j->erase("eval_every");
    }
    if (a != b) throw CheckpointError("checkpoint was written with a different training configuration");
    check_manifest(ck.params, params_);
    if (ck.buffer.has_value() != buffer_.has_value()) throw CheckpointError("checkpoint buffer presence mismatch");
    params_ = std::move(ck.params);
    opt_ = std::move(ck.opt);
    t_ = ck.steps_done;
    data_rng_ = Rng::from_string(ck.data_rng);
    noise_rng_ = Rng::from_string(ck.noise_rng);
    buffer_ = std::move(ck.buffer);
  }

 private:
  std::size_t latent_size() const { return static_cast<std::size_t>(cfg_.K / 2) * stream_.frame_bytes(); }

  std::vector<Window> offline_batch() {
    std::vector<Window> batch;
    for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(sample_offline_window(stream_, data_rng_, cfg_.K));
    return batch;
  }

  // N copies of the current window; each copy gets its own (s, eps).
  std::vector<Window> lifelong_batch() {
    const Window cur = lifelong_window(stream_, t_, cfg_.K);
    return std::vector<Window>(static_cast<std::size_t>(cfg_.batch_size), cur);
  }

  // Current window plus N-1 buffer draws; copies of the current window stand
  // in while the buffer is still empty.
  std::vector<Window> replay_batch() {
    std::vector<Window> batch{lifelong_window(stream_, t_, cfg_.K)};
    const std::size_t extra = static_cast<std::size_t>(cfg_.batch_size - 1);
    if (buffer_->empty()) {
      for (std::size_t i = 0; i < extra; ++i) batch.push_back(batch.front());
    } else {
      for (auto& w : buffer_->sample(extra, data_rng_)) batch.push_back(std::move(w));
    }
    return batch;
  }

  TrainConfig cfg_;
  const VideoStream& stream_;
  UNet<float> net_;
  NoiseSchedule schedule_;
  ParamSet<float> params_;
  OptimizerState<float> opt_;
  std::optional<ReplayBuffer> buffer_;
  Rng data_rng_;
  Rng noise_rng_;
  std::uint64_t t_ = 0;
};

}  // namespace llbb
