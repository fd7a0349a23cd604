#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "llbb/ballworld.hpp"
#include "llbb/diffusion.hpp"
#include "llbb/errors.hpp"
#include "llbb/metrics.hpp"
#include "llbb/parallel.hpp"
#include "llbb/rng.hpp"
#include "llbb/sampler.hpp"
#include "llbb/stream_store.hpp"

namespace llbb {

// Where the conditioning frames of one sampling round came from.
struct RoundProvenance {
  int round = 0;
  bool ground_truth = false;  // stream frames for round 0, generated frames afterwards
  std::uint64_t first = 0;    // stream index, or index into Rollout::generated
  int count = 0;
};

struct Rollout {
  std::uint64_t start_index = 0;
  int frames_per_round = 0;
  int resolution = 0;
  std::vector<float> conditioning;  // frames_per_round frames, frame-major HWC in [-1, 1]
  std::vector<float> generated;     // n_rounds * frames_per_round frames
  std::vector<RoundProvenance> rounds;

  std::size_t frame_values() const { return static_cast<std::size_t>(resolution) * resolution * 3; }
  std::size_t generated_frames() const { return generated.size() / frame_values(); }
  std::span<const float> generated_frame(std::size_t k) const {
    return std::span<const float>(generated).subspan(k * frame_values(), frame_values());
  }
  // Stream index that generated frame k predicts.
  std::uint64_t target_index(std::size_t k) const { return start_index + frames_per_round + k; }
};

inline std::vector<std::uint8_t> to_bytes(std::span<const float> frame) {
  std::vector<std::uint8_t> out(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double v = std::clamp(static_cast<double>(frame[i]), -1.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
  }
  return out;
}

// Round 0 conditions on stream frames [start, start + K/2); each later round
// on the previous round's clamped outputs.
inline Rollout autoregressive_rollout(const DenoiseFn<float>& f, const VideoStream& stream, std::uint64_t start_index,
                                      int n_rounds, int K, const NoiseSchedule& sch, const SamplerConfig& cfg,
                                      Rng& rng) {
  validate_context(K);
  if (n_rounds < 1) throw ConfigError("rollout needs at least one round");
  const int half = K / 2;
  if (start_index + half > stream.frame_count()) {
    throw BoundsError("rollout start " + std::to_string(start_index) + " leaves fewer than " + std::to_string(half) +
                      " conditioning frames");
  }
  Rollout r;
  r.start_index = start_index;
  r.frames_per_round = half;
  r.resolution = stream.width();
  const std::size_t fv = r.frame_values();
  r.conditioning.resize(half * fv);
  for (int k = 0; k < half; ++k) {
    const auto bytes = stream.read_frame(start_index + k);
    for (std::size_t i = 0; i < fv; ++i) r.conditioning[k * fv + i] = Window::normalize(bytes[i]);
  }
  std::vector<float> obs = r.conditioning;
  r.generated.reserve(static_cast<std::size_t>(n_rounds) * half * fv);
  for (int round = 0; round < n_rounds; ++round) {
    RoundProvenance p;
    p.round = round;
    p.ground_truth = round == 0;
    p.first = round == 0 ? start_index : static_cast<std::uint64_t>(round - 1) * half;
    p.count = half;
    r.rounds.push_back(p);
    std::vector<float> lat;
    try {
      lat = karras_sample<float>(f, obs, sch, cfg, rng);
    } catch (const NumericError& e) {
      throw NumericError("rollout round " + std::to_string(round) + ": " + e.what());
    }
    for (auto& v : lat) v = std::clamp(v, -1.0f, 1.0f);
    r.generated.insert(r.generated.end(), lat.begin(), lat.end());
    obs = std::move(lat);
  }
  return r;
}

// Evenly spaced timesteps round(j * S / 10), j = 1..10.
inline std::vector<int> eval_noise_levels(const NoiseSchedule& sch, int levels = 10) {
  std::vector<int> out;
  for (int j = 1; j <= levels; ++j) {
    out.push_back(std::clamp(static_cast<int>(std::lround(static_cast<double>(j) * sch.S / levels)), 1, sch.S));
  }
  return out;
}

struct EvalLossResult {
  double mean = 0.0;
  std::vector<std::uint64_t> windows;  // sorted start indices
  std::vector<double> per_window;      // mean over noise levels, aligned with `windows`
};

// Each window gets its own noise stream keyed by (seed, start index), so the
// result does not depend on window order or worker count.
inline EvalLossResult eval_loss(const DenoiseFn<float>& f, const VideoStream& stream,
                                std::vector<std::uint64_t> windows, const NoiseSchedule& sch, std::uint64_t seed,
                                int K = kDefaultContext) {
  if (windows.empty()) throw ConfigError("eval_loss: no evaluation windows");
  std::sort(windows.begin(), windows.end());
  const auto levels = eval_noise_levels(sch);
  EvalLossResult r;
  r.windows = windows;
  r.per_window.assign(windows.size(), 0.0);
  parallel_for(windows.size(), [&](std::size_t i) {
    const auto w = read_window(stream, windows[i], K);
    Rng rng(mix_seed(seed, windows[i]));
    std::vector<float> eps(static_cast<std::size_t>(K / 2) * w.frame_bytes());
    double acc = 0.0;
    for (int s : levels) {
      rng.fill_normal<float>(eps);
      acc += denoising_loss_value<float>(f, w, s, eps, sch);
    }
    r.per_window[i] = acc / static_cast<double>(levels.size());
  });
  r.mean = std::accumulate(r.per_window.begin(), r.per_window.end(), 0.0) / static_cast<double>(windows.size());
  return r;
}

enum class WindowSelection { FirstN, EvenlySpaced };

inline std::vector<std::uint64_t> select_eval_windows(std::uint64_t frame_count, WindowSelection mode, std::uint64_t n,
                                                      int K = kDefaultContext) {
  const std::uint64_t available = lifelong_step_count(frame_count, K);
  if (n == 0) throw ConfigError("select_eval_windows: n must be positive");
  if (n > available) {
    throw BoundsError("select_eval_windows: " + std::to_string(n) + " windows requested, stream has " +
                      std::to_string(available));
  }
  std::vector<std::uint64_t> out;
  if (mode == WindowSelection::FirstN) {
    for (std::uint64_t i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  if (n == 1) return {0};
  const double last = static_cast<double>(frame_count - K);
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto idx = static_cast<std::uint64_t>(std::llround(static_cast<double>(k) * last / static_cast<double>(n - 1)));
    if (out.empty() || out.back() != idx) out.push_back(idx);
  }
  return out;
}

inline WindowSelection default_selection(DatasetVersion v) {
  return v == DatasetVersion::O ? WindowSelection::FirstN : WindowSelection::EvenlySpaced;
}

// Extra metrics (for example FVD-style feature distances) plug in here.
class RolloutMetric {
 public:
  virtual ~RolloutMetric() = default;
  virtual std::string name() const = 0;
  // rollouts[w][t]: trajectory t sampled from evaluation window w.
  virtual double score(const std::vector<std::vector<Rollout>>& rollouts, const Sidecar& truth) const = 0;
};

inline std::vector<std::vector<BallObservation>> extract_rollout(const Rollout& r, const ExtractConfig& cfg = {}) {
  std::vector<std::vector<BallObservation>> out;
  for (std::size_t k = 0; k < r.generated_frames(); ++k) out.push_back(extract_balls(r.generated_frame(k), r.resolution, cfg));
  return out;
}

inline AdeResult rollout_min_ade(const std::vector<Rollout>& trajectories, const Sidecar& truth,
                                 const ExtractConfig& cfg = {}) {
  if (trajectories.empty()) throw ContractError("rollout_min_ade: no trajectories");
  const auto& first = trajectories.front();
  std::vector<std::array<Vec2, 2>> gt;
  for (std::size_t k = 0; k < first.generated_frames(); ++k) {
    const auto idx = first.target_index(k);
    if (idx >= truth.records.size()) throw BoundsError("rollout extends past the ground-truth sidecar");
    gt.push_back(truth.centers_px(idx));
  }
  std::vector<std::vector<std::vector<BallObservation>>> pred;
  for (const auto& r : trajectories) pred.push_back(extract_rollout(r, cfg));
  return min_ade(pred, gt, first.resolution);
}

// Tracking gate for transitions: a ball moves at most about 2 px per frame at 32x32.
inline double transition_max_jump(int resolution) { return 0.15 * resolution; }

inline TransitionTally rollout_tally(const Rollout& r, const ExtractConfig& cfg = {}) {
  return tally_transitions(extract_rollout(r, cfg), transition_max_jump(r.resolution));
}

class MinAdeMetric : public RolloutMetric {
 public:
  std::string name() const override { return "min_ade"; }
  double score(const std::vector<std::vector<Rollout>>& rollouts, const Sidecar& truth) const override {
    if (rollouts.empty()) throw UndefinedMetricError("min_ade: no rollouts");
    double acc = 0.0;
    for (const auto& w : rollouts) acc += rollout_min_ade(w, truth).min_ade;
    return acc / static_cast<double>(rollouts.size());
  }
};

class ColorKlMetric : public RolloutMetric {
 public:
  explicit ColorKlMetric(double alpha = 1.0) : alpha_(alpha) {}
  std::string name() const override { return "color_kl"; }
  double score(const std::vector<std::vector<Rollout>>& rollouts, const Sidecar&) const override {
    TransitionTally t;
    for (const auto& w : rollouts)
      for (const auto& r : w) t += rollout_tally(r);
    return color_kl(t, alpha_);
  }

 private:
  double alpha_;
};

struct RolloutEvalConfig {
  int trajectories = 3;
  int rounds = 9;
  SamplerConfig sampler;
};

struct RolloutEvalResult {
  std::vector<std::uint64_t> windows;
  std::vector<double> min_ade;  // per window
  double mean_min_ade = 0.0;
  TransitionTally tally;
  double color_kl = 0.0;  // NaN when no transitions were observed
};

// Samples `trajectories` rollouts per window (rng keyed by seed, window and
// trajectory) and scores them against the sidecar.
inline RolloutEvalResult evaluate_rollouts(const DenoiseFn<float>& f, const VideoStream& stream, const Sidecar& truth,
                                           std::vector<std::uint64_t> windows, const NoiseSchedule& sch,
                                           const RolloutEvalConfig& cfg, std::uint64_t seed,
                                           int K = kDefaultContext) {
  if (windows.empty()) throw ConfigError("evaluate_rollouts: no windows");
  if (cfg.trajectories < 1) throw ConfigError("evaluate_rollouts: need at least one trajectory");
  std::sort(windows.begin(), windows.end());
  const std::uint64_t span = static_cast<std::uint64_t>(K / 2) * (1 + cfg.rounds);
  RolloutEvalResult res;
  for (auto w : windows) {
    if (w + span > stream.frame_count()) continue;
    res.windows.push_back(w);
  }
  if (res.windows.empty()) throw BoundsError("evaluate_rollouts: no window leaves room for a full rollout");

  const std::size_t nw = res.windows.size();
  const std::size_t nt = static_cast<std::size_t>(cfg.trajectories);
  std::vector<Rollout> rollouts(nw * nt);
  parallel_for(nw * nt, [&](std::size_t job) {
    const auto w = res.windows[job / nt];
    Rng rng(mix_seed(mix_seed(seed, w), job % nt));
    rollouts[job] = autoregressive_rollout(f, stream, w, cfg.rounds, K, sch, cfg.sampler, rng);
  });
  for (std::size_t i = 0; i < nw; ++i) {
    std::vector<Rollout> group(rollouts.begin() + i * nt, rollouts.begin() + (i + 1) * nt);
    res.min_ade.push_back(rollout_min_ade(group, truth).min_ade);
    for (const auto& r : group) res.tally += rollout_tally(r);
  }
  res.mean_min_ade = std::accumulate(res.min_ade.begin(), res.min_ade.end(), 0.0) / static_cast<double>(nw);
  res.color_kl = res.tally.total() > 0 ? color_kl(res.tally) : std::nan("");
  return res;
}

}  // namespace llbb
