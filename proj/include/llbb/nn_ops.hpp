#pragma once

// Forward/backward kernels for the denoiser. Activations are channel-major
// (C, H, W) buffers; matrix products go through Eigen.
//
// Small products would otherwise take Eigen's coefficient-wise path, whose
// summation order depends on buffer alignment. The packed kernel does not, so
// results are bit-identical across runs. Reductions below are plain loops for
// the same reason.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace llbb::nn {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

struct Dims {
  int c = 0;
  int h = 0;
  int w = 0;
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
  int hw() const { return h * w; }
};

// ---------------------------------------------------------------- conv

template <typename T>
void im2col3x3(const T* x, Dims d, T* cols) {
  const int hw = d.hw();
  for (int ci = 0; ci < d.c; ++ci) {
    const T* plane = x + static_cast<std::size_t>(ci) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < d.h; ++y) {
          const int sy = y + ky - 1;
          T* dst = row + static_cast<std::size_t>(y) * d.w;
          if (sy < 0 || sy >= d.h) {
            std::fill(dst, dst + d.w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * d.w;
          for (int x = 0; x < d.w; ++x) {
            const int sx = x + kx - 1;
            dst[x] = (sx < 0 || sx >= d.w) ? T(0) : src[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3_add(const T* cols, Dims d, T* dx) {
  const int hw = d.hw();
  for (int ci = 0; ci < d.c; ++ci) {
    T* plane = dx + static_cast<std::size_t>(ci) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < d.h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= d.h) continue;
          const T* src = row + static_cast<std::size_t>(y) * d.w;
          T* dst = plane + static_cast<std::size_t>(sy) * d.w;
          for (int x = 0; x < d.w; ++x) {
            const int sx = x + kx - 1;
            if (sx >= 0 && sx < d.w) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

// Same-padding convolution with a 1x1 or 3x3 kernel. `cols` receives the
// unfolded input (kept for the backward pass).
template <typename T>
void conv_forward(const T* x, Dims in, const T* weight, const T* bias, int cout, int ksize, std::vector<T>& cols,
                  T* y) {
  const int hw = in.hw();
  const int kdim = in.c * ksize * ksize;
  const T* colp = x;
  if (ksize == 3) {
    cols.resize(static_cast<std::size_t>(kdim) * hw);
    im2col3x3(x, in, cols.data());
    colp = cols.data();
  } else {
    cols.assign(x, x + in.size());
    colp = cols.data();
  }
  MapR<T> Y(y, cout, hw);
  CMapR<T> W(weight, cout, kdim);
  CMapR<T> C(colp, kdim, hw);
  Y.noalias() = W * C;
  for (int o = 0; o < cout; ++o) Y.row(o).array() += bias[o];
}

// Accumulates weight/bias gradients; writes (adds) the input gradient when dx != nullptr.
template <typename T>
void conv_backward(const T* dy, Dims in, const T* weight, int cout, int ksize, const std::vector<T>& cols, T* dweight,
                   T* dbias, T* dx) {
  const int hw = in.hw();
  const int kdim = in.c * ksize * ksize;
  CMapR<T> dY(dy, cout, hw);
  CMapR<T> C(cols.data(), kdim, hw);
  MapR<T> dW(dweight, cout, kdim);
  dW.noalias() += dY * C.transpose();
  for (int o = 0; o < cout; ++o) {
    T acc = 0;
    for (int p = 0; p < hw; ++p) acc += dy[static_cast<std::size_t>(o) * hw + p];
    dbias[o] += acc;
  }
  if (dx == nullptr) return;
  CMapR<T> W(weight, cout, kdim);
  if (ksize == 3) {
    MatR<T> dcols = W.transpose() * dY;
    col2im3x3_add(dcols.data(), in, dx);
  } else {
    MapR<T> dX(dx, in.c, hw);
    dX.noalias() += W.transpose() * dY;
  }
}

// ---------------------------------------------------------------- group norm

template <typename T>
struct GroupNormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
void group_norm_forward(const T* x, Dims d, int groups, const T* gamma, const T* beta, T eps,
                        GroupNormCache<T>& cache, T* y) {
  const int cpg = d.c / groups;
  const std::size_t hw = static_cast<std::size_t>(d.hw());
  const std::size_t m = static_cast<std::size_t>(cpg) * hw;
  cache.xhat.resize(d.size());
  cache.rstd.resize(groups);
  for (int g = 0; g < groups; ++g) {
    const std::size_t off = static_cast<std::size_t>(g) * m;
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += x[off + i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double dv = x[off + i] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(m);
    const T rstd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    cache.rstd[g] = rstd;
    const T mu = static_cast<T>(mean);
    for (int cc = 0; cc < cpg; ++cc) {
      const int c = g * cpg + cc;
      const std::size_t base = static_cast<std::size_t>(c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x[base + i] - mu) * rstd;
        cache.xhat[base + i] = xh;
        y[base + i] = gamma[c] * xh + beta[c];
      }
    }
  }
}

template <typename T>
void group_norm_backward(const T* dy, Dims d, int groups, const T* gamma, const GroupNormCache<T>& cache, T* dgamma,
                         T* dbeta, T* dx) {
  const int cpg = d.c / groups;
  const std::size_t hw = static_cast<std::size_t>(d.hw());
  const double m = static_cast<double>(cpg) * static_cast<double>(hw);
  for (int g = 0; g < groups; ++g) {
    double sum_dxh = 0.0;
    double sum_dxh_xh = 0.0;
    for (int cc = 0; cc < cpg; ++cc) {
      const int c = g * cpg + cc;
      const std::size_t base = static_cast<std::size_t>(c) * hw;
      double dg = 0.0;
      double db = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double gy = dy[base + i];
        const double xh = cache.xhat[base + i];
        dg += gy * xh;
        db += gy;
        const double dxh = gy * gamma[c];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
      }
      dgamma[c] += static_cast<T>(dg);
      dbeta[c] += static_cast<T>(db);
    }
    const double rstd = cache.rstd[g];
    const double a = sum_dxh / m;
    const double b = sum_dxh_xh / m;
    for (int cc = 0; cc < cpg; ++cc) {
      const int c = g * cpg + cc;
      const std::size_t base = static_cast<std::size_t>(c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double dxh = static_cast<double>(dy[base + i]) * gamma[c];
        dx[base + i] += static_cast<T>(rstd * (dxh - a - cache.xhat[base + i] * b));
      }
    }
  }
}

// ---------------------------------------------------------------- activations

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
void silu_forward(const T* x, std::size_t n, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

// dx += dy * silu'(x)
template <typename T>
void silu_backward(const T* x, const T* dy, std::size_t n, T* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const T s = sigmoid(x[i]);
    dx[i] += dy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
}

// ---------------------------------------------------------------- resampling

template <typename T>
void avg_pool2_forward(const T* x, Dims in, T* y) {
  const int oh = in.h / 2;
  const int ow = in.w / 2;
  for (int c = 0; c < in.c; ++c) {
    const T* src = x + static_cast<std::size_t>(c) * in.hw();
    T* dst = y + static_cast<std::size_t>(c) * oh * ow;
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        const T* p = src + static_cast<std::size_t>(2 * yy) * in.w + 2 * xx;
        dst[yy * ow + xx] = T(0.25) * (p[0] + p[1] + p[in.w] + p[in.w + 1]);
      }
    }
  }
}

template <typename T>
void avg_pool2_backward(const T* dy, Dims in, T* dx) {
  const int oh = in.h / 2;
  const int ow = in.w / 2;
  for (int c = 0; c < in.c; ++c) {
    const T* src = dy + static_cast<std::size_t>(c) * oh * ow;
    T* dst = dx + static_cast<std::size_t>(c) * in.hw();
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        const T g = T(0.25) * src[yy * ow + xx];
        T* p = dst + static_cast<std::size_t>(2 * yy) * in.w + 2 * xx;
        p[0] += g;
        p[1] += g;
        p[in.w] += g;
        p[in.w + 1] += g;
      }
    }
  }
}

// Nearest-neighbour 2x upsampling; `in` is the low-resolution shape.
template <typename T>
void upsample2_forward(const T* x, Dims in, T* y) {
  const int ow = in.w * 2;
  for (int c = 0; c < in.c; ++c) {
    const T* src = x + static_cast<std::size_t>(c) * in.hw();
    T* dst = y + static_cast<std::size_t>(c) * in.hw() * 4;
    for (int yy = 0; yy < in.h * 2; ++yy)
      for (int xx = 0; xx < ow; ++xx) dst[yy * ow + xx] = src[(yy / 2) * in.w + xx / 2];
  }
}

template <typename T>
void upsample2_backward(const T* dy, Dims in, T* dx) {
  const int ow = in.w * 2;
  for (int c = 0; c < in.c; ++c) {
    const T* src = dy + static_cast<std::size_t>(c) * in.hw() * 4;
    T* dst = dx + static_cast<std::size_t>(c) * in.hw();
    for (int yy = 0; yy < in.h * 2; ++yy)
      for (int xx = 0; xx < ow; ++xx) dst[(yy / 2) * in.w + xx / 2] += src[yy * ow + xx];
  }
}

// ---------------------------------------------------------------- attention

// Single-head softmax attention over the spatial positions of a (C, N) map.
// qkv holds the stacked projections (3C, N); out receives (C, N).
template <typename T>
void attention_core_forward(const T* qkv, int c, int n, std::vector<T>& probs, T* out) {
  CMapR<T> Q(qkv, c, n);
  CMapR<T> K(qkv + static_cast<std::size_t>(c) * n, c, n);
  CMapR<T> V(qkv + static_cast<std::size_t>(2) * c * n, c, n);
  probs.resize(static_cast<std::size_t>(n) * n);
  MapR<T> A(probs.data(), n, n);
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  A.noalias() = (Q.transpose() * K) * scale;
  for (int i = 0; i < n; ++i) {
    T* row = probs.data() + static_cast<std::size_t>(i) * n;
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= total;
  }
  MapR<T> O(out, c, n);
  O.noalias() = V * A.transpose();
}

template <typename T>
void attention_core_backward(const T* qkv, int c, int n, const std::vector<T>& probs, const T* dout, T* dqkv) {
  CMapR<T> Q(qkv, c, n);
  CMapR<T> K(qkv + static_cast<std::size_t>(c) * n, c, n);
  CMapR<T> V(qkv + static_cast<std::size_t>(2) * c * n, c, n);
  CMapR<T> A(probs.data(), n, n);
  CMapR<T> dO(dout, c, n);
  MapR<T> dQ(dqkv, c, n);
  MapR<T> dK(dqkv + static_cast<std::size_t>(c) * n, c, n);
  MapR<T> dV(dqkv + static_cast<std::size_t>(2) * c * n, c, n);
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  dV.noalias() += dO * A;
  MatR<T> dA = dO.transpose() * V;
  MatR<T> dS(n, n);
  for (int i = 0; i < n; ++i) {
    T dot = 0;
    for (int j = 0; j < n; ++j) dot += dA(i, j) * A(i, j);
    dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
  }
  dS *= scale;
  dQ.noalias() += K * dS.transpose();
  dK.noalias() += Q * dS;
}

// ---------------------------------------------------------------- misc

template <typename T>
void linear_forward(const T* x, int in, const T* weight, const T* bias, int out, T* y) {
  for (int o = 0; o < out; ++o) {
    T acc = bias[o];
    const T* wr = weight + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += wr[i] * x[i];
    y[o] = acc;
  }
}

template <typename T>
void linear_backward(const T* x, int in, const T* weight, int out, const T* dy, T* dweight, T* dbias, T* dx) {
  for (int o = 0; o < out; ++o) {
    dbias[o] += dy[o];
    T* dwr = dweight + static_cast<std::size_t>(o) * in;
    const T* wr = weight + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      dwr[i] += dy[o] * x[i];
      if (dx) dx[i] += dy[o] * wr[i];
    }
  }
}

// Sinusoidal embedding of a scalar timestep: [sin(s f_i), cos(s f_i)].
template <typename T>
std::vector<T> timestep_embedding(double s, int dim) {
  std::vector<T> e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / half);
    e[i] = static_cast<T>(std::sin(s * f));
    e[half + i] = static_cast<T>(std::cos(s * f));
  }
  return e;
}

}  // namespace llbb::nn
