#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "llbb/errors.hpp"
#include "llbb/tensor.hpp"

namespace llbb {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  ParamSet<T> m;
  ParamSet<T> v;
  std::uint64_t step = 0;

  static OptimizerState for_params(const ParamSet<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
  bool operator==(const OptimizerState&) const = default;
};

// Adam moments with bias correction plus decoupled weight decay:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
template <typename T>
void adamw_update(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& st, const AdamWConfig& h) {
  params.check_same_layout(grads);
  params.check_same_layout(st.m);
  st.step += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.num_tensors(); ++i) {
    auto& p = params[i].data;
    const auto& g = grads[i].data;
    auto& m = st.m[i].data;
    auto& v = st.v[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = h.beta1 * m[k] + (1.0 - h.beta1) * gk;
      const double vk = h.beta2 * v[k] + (1.0 - h.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double theta = p[k];
      const double upd = h.lr * (mk / bc1) / (std::sqrt(vk / bc2) + h.eps) + h.lr * h.weight_decay * theta;
      const double next = theta - upd;
      if (!std::isfinite(next)) throw NumericError("non-finite AdamW update in tensor '" + params[i].name + "'");
      p[k] = static_cast<T>(next);
    }
  }
}

// Rescales grads so their global L2 norm is at most max_norm; returns the
// factor applied (1 when no clipping happened).
template <typename T>
double clip_gradients(ParamSet<T>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("gradient clipping threshold must be positive");
  const double norm = std::sqrt(grads.squared_norm());
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  grads.scale(static_cast<T>(scale));
  return scale;
}

}  // namespace llbb
