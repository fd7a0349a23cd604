#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "llbb/diffusion.hpp"
#include "llbb/errors.hpp"
#include "llbb/rng.hpp"

namespace llbb {

struct SamplerConfig {
  int n_steps = 50;
  double churn = 40.0;
  double s_tmin = 0.05;
  double s_tmax = 50.0;
  double s_noise = 1.0;
  double rho = 7.0;
};

// n_steps sigmas from sigma_max down to sigma_min with rho-spacing, followed by 0.
inline std::vector<double> karras_sigmas(double sigma_min, double sigma_max, int n_steps, double rho = 7.0) {
  if (n_steps < 1) throw ConfigError("sampler needs at least one step");
  std::vector<double> sig(n_steps + 1, 0.0);
  if (n_steps == 1) {
    sig[0] = sigma_max;
    return sig;
  }
  const double a = std::pow(sigma_max, 1.0 / rho);
  const double b = std::pow(sigma_min, 1.0 / rho);
  for (int i = 0; i < n_steps; ++i) {
    sig[i] = std::pow(a + static_cast<double>(i) / (n_steps - 1) * (b - a), rho);
  }
  sig[0] = sigma_max;
  sig[n_steps - 1] = sigma_min;
  return sig;
}

// Stochastic Heun sampler in sigma space. The epsilon-predictor is queried on
// the variance-preserving input x / sqrt(1 + sigma^2) at the discrete
// timestep nearest to sigma; the ODE derivative (x - D(x)) / sigma is then
// exactly the predicted noise.
template <typename T>
std::vector<T> karras_sample(const DenoiseFn<T>& f, std::span<const T> obs, const NoiseSchedule& sch,
                             const SamplerConfig& cfg, Rng& rng) {
  const auto sigmas = karras_sigmas(sch.sigma_min(), sch.sigma_max(), cfg.n_steps, cfg.rho);
  const std::size_t n = obs.size();
  std::vector<T> x(n);
  rng.fill_normal<T>(x);
  for (auto& v : x) v = static_cast<T>(static_cast<double>(v) * sigmas[0]);

  auto predict = [&](const std::vector<T>& xs, double sig) {
    const double scale = 1.0 / std::sqrt(1.0 + sig * sig);
    std::vector<T> scaled(n);
    for (std::size_t i = 0; i < n; ++i) scaled[i] = static_cast<T>(static_cast<double>(xs[i]) * scale);
    auto eps = f(obs, scaled, sch.nearest_timestep(sig));
    if (eps.size() != n) throw ContractError("denoiser returned the wrong number of values");
    return eps;
  };

  const double gamma_max = std::min(cfg.churn / cfg.n_steps, std::sqrt(2.0) - 1.0);
  std::vector<T> noise(n);
  std::vector<T> x_next(n);
  for (int i = 0; i < cfg.n_steps; ++i) {
    const double sig = sigmas[i];
    const double sig_next = sigmas[i + 1];
    const double gamma = (cfg.churn > 0.0 && sig >= cfg.s_tmin && sig <= cfg.s_tmax) ? gamma_max : 0.0;
    const double sig_hat = sig * (1.0 + gamma);
    if (gamma > 0.0) {
      rng.fill_normal<T>(noise);
      const double add = std::sqrt(sig_hat * sig_hat - sig * sig) * cfg.s_noise;
      for (std::size_t k = 0; k < n; ++k) x[k] = static_cast<T>(x[k] + add * noise[k]);
    }
    const auto d = predict(x, sig_hat);
    const double dt = sig_next - sig_hat;
    for (std::size_t k = 0; k < n; ++k) x_next[k] = static_cast<T>(x[k] + dt * d[k]);
    if (sig_next != 0.0) {
      const auto d2 = predict(x_next, sig_next);
      for (std::size_t k = 0; k < n; ++k) x_next[k] = static_cast<T>(x[k] + dt * 0.5 * (d[k] + d2[k]));
    }
    x.swap(x_next);
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::isfinite(static_cast<double>(x[k]))) throw NumericError("sampler produced a non-finite value");
  }
  return x;
}

}  // namespace llbb
