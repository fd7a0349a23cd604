#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "llbb/errors.hpp"
#include "llbb/rng.hpp"
#include "llbb/stream_store.hpp"
#include "llbb/tensor.hpp"
#include "llbb/unet.hpp"

namespace llbb {

// Variance-preserving corruption coefficients, 1-based in s (index 0 unused).
struct NoiseSchedule {
  int S = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;

  // Discrete timestep whose sigma is closest to the given value.
  int nearest_timestep(double sig) const {
    auto it = std::lower_bound(sigma.begin() + 1, sigma.end(), sig);
    if (it == sigma.end()) return S;
    int s = static_cast<int>(it - sigma.begin());
    if (s > 1 && std::abs(sigma[s - 1] - sig) <= std::abs(sigma[s] - sig)) --s;
    return s;
  }

  double sigma_min() const { return sigma[1]; }
  double sigma_max() const { return sigma[S]; }
};

inline NoiseSchedule make_schedule(int S = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (S < 2) throw ConfigError("diffusion steps S must be >= 2, got " + std::to_string(S));
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw ConfigError("beta range must satisfy 0 < start < end < 1");
  }
  NoiseSchedule sch;
  sch.S = S;
  sch.beta.assign(S + 1, 0.0);
  sch.alpha.assign(S + 1, 1.0);
  sch.alpha_bar.assign(S + 1, 1.0);
  sch.sigma.assign(S + 1, 0.0);
  for (int s = 1; s <= S; ++s) {
    sch.beta[s] = beta_start + (beta_end - beta_start) * static_cast<double>(s - 1) / static_cast<double>(S - 1);
    sch.alpha[s] = 1.0 - sch.beta[s];
    sch.alpha_bar[s] = sch.alpha_bar[s - 1] * sch.alpha[s];
    sch.sigma[s] = std::sqrt((1.0 - sch.alpha_bar[s]) / sch.alpha_bar[s]);
  }
  return sch;
}

// Observed half and noisy latent half of a window, frame-major HWC.
template <typename T>
struct CorruptedWindow {
  std::vector<T> obs;
  std::vector<T> lat_s;
  std::vector<T> eps;
  int s = 0;
};

template <typename T>
std::vector<T> window_half(const Window& w, bool latent) {
  const std::size_t half = static_cast<std::size_t>(w.K / 2) * w.frame_bytes();
  const std::size_t off = latent ? half : 0;
  std::vector<T> out(half);
  for (std::size_t i = 0; i < half; ++i) out[i] = static_cast<T>(Window::normalize(w.raw[off + i]));
  return out;
}

template <typename T>
void corrupt_latent(std::span<const T> lat, int s, std::span<const T> eps, const NoiseSchedule& sch,
                    std::span<T> out) {
  if (eps.size() != lat.size() || out.size() != lat.size()) {
    throw ContractError("corrupt: noise has " + std::to_string(eps.size()) + " values, latent half has " +
                        std::to_string(lat.size()));
  }
  if (s < 1 || s > sch.S) throw ContractError("corrupt: timestep " + std::to_string(s) + " outside [1, S]");
  const T a = static_cast<T>(std::sqrt(sch.alpha_bar[s]));
  const T b = static_cast<T>(std::sqrt(1.0 - sch.alpha_bar[s]));
  for (std::size_t i = 0; i < lat.size(); ++i) out[i] = a * lat[i] + b * eps[i];
}

template <typename T>
CorruptedWindow<T> corrupt(const Window& w, int s, std::span<const T> eps, const NoiseSchedule& sch) {
  CorruptedWindow<T> cw;
  cw.obs = window_half<T>(w, false);
  const auto lat = window_half<T>(w, true);
  cw.lat_s.resize(lat.size());
  corrupt_latent<T>(lat, s, eps, sch, cw.lat_s);
  cw.eps.assign(eps.begin(), eps.end());
  cw.s = s;
  return cw;
}

// Frame-major HWC halves -> channel-stacked (6F, R, R) network input.
template <typename T>
void pack_input(std::span<const T> obs, std::span<const T> lat_s, int frames, int R, std::span<T> out) {
  const std::size_t hw = static_cast<std::size_t>(R) * R;
  const std::size_t half = static_cast<std::size_t>(frames) * hw * 3;
  if (obs.size() != half || lat_s.size() != half || out.size() != 2 * half) {
    throw ContractError("denoiser input halves have the wrong shape for " + std::to_string(frames) + " frames of " +
                        std::to_string(R) + "x" + std::to_string(R));
  }
  for (int part = 0; part < 2; ++part) {
    const T* src = part == 0 ? obs.data() : lat_s.data();
    for (int f = 0; f < frames; ++f) {
      for (std::size_t p = 0; p < hw; ++p) {
        for (int c = 0; c < 3; ++c) {
          const std::size_t ch = static_cast<std::size_t>(part * frames + f) * 3 + c;
          out[ch * hw + p] = src[(static_cast<std::size_t>(f) * hw + p) * 3 + c];
        }
      }
    }
  }
}

// (3F, R, R) channel-major -> frame-major HWC.
template <typename T>
void unpack_output(std::span<const T> chw, int frames, int R, std::span<T> out) {
  const std::size_t hw = static_cast<std::size_t>(R) * R;
  for (int f = 0; f < frames; ++f)
    for (std::size_t p = 0; p < hw; ++p)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(f) * hw + p) * 3 + c] = chw[(static_cast<std::size_t>(f) * 3 + c) * hw + p];
}

// Noise predictor F(obs, lat_s, s) on frame-major HWC halves.
template <typename T>
using DenoiseFn = std::function<std::vector<T>(std::span<const T> obs, std::span<const T> lat_s, int s)>;

template <typename T>
DenoiseFn<T> unet_denoiser(const UNet<T>& net, const ParamSet<T>& params) {
  return [&net, &params](std::span<const T> obs, std::span<const T> lat_s, int s) {
    const auto& cfg = net.config();
    std::vector<T> input(net.input_size());
    pack_input<T>(obs, lat_s, cfg.frames, cfg.resolution, input);
    const auto out = net.forward(params, input, static_cast<double>(s));
    std::vector<T> eps_hat(lat_s.size());
    unpack_output<T>(out, cfg.frames, cfg.resolution, eps_hat);
    return eps_hat;
  };
}

template <typename T>
double mse(std::span<const T> a, std::span<const T> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// Monte-Carlo draw of (s, eps) for one loss term.
template <typename T>
struct NoiseDraw {
  int s = 1;
  std::vector<T> eps;
};

template <typename T>
NoiseDraw<T> draw_noise(Rng& rng, const NoiseSchedule& sch, std::size_t n) {
  NoiseDraw<T> d;
  d.s = static_cast<int>(rng.uniform_int(1, static_cast<std::uint64_t>(sch.S)));
  d.eps.resize(n);
  rng.fill_normal<T>(d.eps);
  return d;
}

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  ParamSet<T> grads;
  int s = 0;
};

// Single-term denoising loss for a fixed (s, eps): mean squared error between
// the injected noise and the prediction, with gradients for every parameter.
template <typename T>
LossAndGrad<T> denoising_loss_at(const UNet<T>& net, const ParamSet<T>& params, const Window& w, int s,
                                 std::span<const T> eps, const NoiseSchedule& sch) {
  const auto& cfg = net.config();
  if (w.K / 2 != cfg.frames || w.width != cfg.resolution || w.height != cfg.resolution) {
    throw ContractError("window shape does not match the denoiser configuration");
  }
  const auto cw = corrupt<T>(w, s, eps, sch);
  std::vector<T> input(net.input_size());
  pack_input<T>(cw.obs, cw.lat_s, cfg.frames, cfg.resolution, input);
  typename UNet<T>::Tape tape;
  const auto out = net.forward(params, input, static_cast<double>(s), tape);

  // Compare in the network's channel-major layout.
  std::vector<T> eps_chw(out.size());
  {
    const std::size_t hw = static_cast<std::size_t>(cfg.resolution) * cfg.resolution;
    for (int f = 0; f < cfg.frames; ++f)
      for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
          eps_chw[(static_cast<std::size_t>(f) * 3 + c) * hw + p] = eps[(static_cast<std::size_t>(f) * hw + p) * 3 + c];
  }
  LossAndGrad<T> r;
  r.s = s;
  r.loss = mse<T>(out, eps_chw);
  if (!std::isfinite(r.loss)) throw NumericError("denoising loss is non-finite (output of tensor 'out')");
  std::vector<T> dout(out.size());
  const T scale = static_cast<T>(2.0 / static_cast<double>(out.size()));
  for (std::size_t i = 0; i < out.size(); ++i) dout[i] = scale * (out[i] - eps_chw[i]);
  r.grads = params.zeros_like();
  net.backward(params, tape, dout, r.grads);
  if (auto bad = r.grads.first_non_finite(); !bad.empty()) {
    throw NumericError("non-finite gradient in tensor '" + bad + "'");
  }
  return r;
}

template <typename T>
LossAndGrad<T> denoising_loss(const UNet<T>& net, const ParamSet<T>& params, const Window& w, Rng& rng,
                              const NoiseSchedule& sch) {
  const std::size_t n = static_cast<std::size_t>(w.K / 2) * w.frame_bytes();
  const auto d = draw_noise<T>(rng, sch, n);
  return denoising_loss_at<T>(net, params, w, d.s, d.eps, sch);
}

// Loss value only, for an arbitrary noise predictor.
template <typename T>
double denoising_loss_value(const DenoiseFn<T>& f, const Window& w, int s, std::span<const T> eps,
                            const NoiseSchedule& sch) {
  const auto cw = corrupt<T>(w, s, eps, sch);
  const auto eps_hat = f(cw.obs, cw.lat_s, s);
  if (eps_hat.size() != eps.size()) throw ContractError("denoiser returned the wrong number of values");
  const double l = mse<T>(eps, eps_hat);
  if (!std::isfinite(l)) throw NumericError("denoising loss is non-finite");
  return l;
}

}  // namespace llbb
