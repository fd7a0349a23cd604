#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "llbb/errors.hpp"
#include "llbb/nn_ops.hpp"
#include "llbb/rng.hpp"
#include "llbb/tensor.hpp"

namespace llbb {

// Shape manifest of the reference denoiser. The observed and noisy frames are
// stacked along channels; the network predicts the noise of the noisy frames.
struct UNetConfig {
  int frames = 5;  // K/2
  int resolution = 32;
  int ch1 = 32;
  int ch2 = 64;
  int ch3 = 128;
  int groups = 8;
  int temb_dim = 64;
  int temb_hidden = 128;

  int in_channels() const { return 6 * frames; }
  int out_channels() const { return 3 * frames; }

  static UNetConfig reference(int K = 10, int resolution = 32) {
    UNetConfig c;
    c.frames = K / 2;
    c.resolution = resolution;
    return c;
  }

  // Tiny variant used for finite-difference checks (749 parameters).
  static UNetConfig reduced() {
    UNetConfig c;
    c.frames = 1;
    c.resolution = 8;
    c.ch1 = c.ch2 = c.ch3 = 2;
    c.groups = 1;
    c.temb_dim = 4;
    c.temb_hidden = 4;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("denoiser config: " + m); };
    if (frames < 1) fail("frames must be >= 1");
    if (resolution < 4 || resolution % 4 != 0) fail("resolution must be a positive multiple of 4");
    for (int c : {ch1, ch2, ch3, ch1 + ch2, ch2 + ch3}) {
      if (c % groups != 0) fail("channel counts must be divisible by groups");
    }
    if (temb_dim < 2 || temb_dim % 2 != 0) fail("temb_dim must be even");
  }

  bool operator==(const UNetConfig&) const = default;
};

template <typename T>
class UNet {
  struct ConvIdx {
    int cin = 0, cout = 0, k = 3;
    std::size_t w = 0, b = 0;
  };
  struct NormIdx {
    int c = 0;
    std::size_t gamma = 0, beta = 0;
  };
  struct LinearIdx {
    int in = 0, out = 0;
    std::size_t w = 0, b = 0;
  };
  struct ResIdx {
    int cin = 0, cout = 0;
    NormIdx n1, n2;
    ConvIdx c1, c2;
    bool has_skip = false;
    ConvIdx skip;
  };
  struct AttnIdx {
    int c = 0;
    NormIdx norm;
    ConvIdx qkv, proj;
  };

  struct ResCache {
    nn::GroupNormCache<T> g1, g2;
    std::vector<T> a1, a2;
    std::vector<T> cols1, cols2, cols_skip;
  };
  struct AttnCache {
    nn::GroupNormCache<T> g;
    std::vector<T> cols_qkv, qkv, probs, cols_proj;
  };

 public:
  // Activations recorded by forward() for the backward pass.
  struct Tape {
    std::vector<T> cols_stem;
    std::vector<T> temb_in, temb_hidden_pre, temb_hidden;
    ResCache enc1, enc2, mid, dec2, dec1;
    AttnCache attn;
    nn::GroupNormCache<T> out_norm;
    std::vector<T> out_pre, cols_out;
  };

  explicit UNet(UNetConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    ParamSet<T> manifest;
    build(manifest);
  }

  const UNetConfig& config() const { return cfg_; }

  // Empty parameter set with the manifest's names and shapes.
  ParamSet<T> manifest() const {
    ParamSet<T> p;
    UNet copy(*this);
    copy.build(p);
    return p;
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm
  // scales; the output convolution starts at zero.
  ParamSet<T> init_params(Rng& rng) const {
    ParamSet<T> p = manifest();
    for (auto& t : p) {
      const bool is_bias = t.name.ends_with(".b") || t.name.ends_with(".beta");
      if (t.name.ends_with(".gamma")) {
        std::fill(t.data.begin(), t.data.end(), T(1));
      } else if (is_bias || t.name.starts_with("out.")) {
        std::fill(t.data.begin(), t.data.end(), T(0));
      } else {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < t.shape.size(); ++i) fan_in *= t.shape[i];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
    return p;
  }

  std::size_t input_size() const {
    return static_cast<std::size_t>(cfg_.in_channels()) * cfg_.resolution * cfg_.resolution;
  }
  std::size_t output_size() const {
    return static_cast<std::size_t>(cfg_.out_channels()) * cfg_.resolution * cfg_.resolution;
  }

  // input: (in_channels, R, R); returns (out_channels, R, R).
  std::vector<T> forward(const ParamSet<T>& p, std::span<const T> input, double s, Tape& tape) const {
    if (input.size() != input_size()) {
      throw ContractError("denoiser input has " + std::to_string(input.size()) + " values, expected " +
                          std::to_string(input_size()));
    }
    const int R = cfg_.resolution;
    const nn::Dims d_in{cfg_.in_channels(), R, R};
    const nn::Dims d1{cfg_.ch1, R, R};

    std::vector<T> h0(d1.size());
    conv_fwd(p, stem_, input.data(), d_in, tape.cols_stem, h0.data());

    // Timestep embedding -> per-channel bias added after the first block.
    tape.temb_in = nn::timestep_embedding<T>(s, cfg_.temb_dim);
    tape.temb_hidden_pre.resize(cfg_.temb_hidden);
    tape.temb_hidden.resize(cfg_.temb_hidden);
    std::vector<T> temb(cfg_.ch1);
    nn::linear_forward(tape.temb_in.data(), temb1_.in, p[temb1_.w].data.data(), p[temb1_.b].data.data(), temb1_.out,
                       tape.temb_hidden_pre.data());
    nn::silu_forward(tape.temb_hidden_pre.data(), tape.temb_hidden.size(), tape.temb_hidden.data());
    nn::linear_forward(tape.temb_hidden.data(), temb2_.in, p[temb2_.w].data.data(), p[temb2_.b].data.data(),
                       temb2_.out, temb.data());

    std::vector<T> h1(d1.size());
    res_fwd(p, enc1_, h0.data(), R, tape.enc1, h1.data());
    for (int c = 0; c < cfg_.ch1; ++c) {
      T* row = h1.data() + static_cast<std::size_t>(c) * d1.hw();
      for (int i = 0; i < d1.hw(); ++i) row[i] += temb[c];
    }

    const int R2 = R / 2;
    const int R4 = R / 4;
    std::vector<T> p1(static_cast<std::size_t>(cfg_.ch1) * R2 * R2);
    nn::avg_pool2_forward(h1.data(), d1, p1.data());
    std::vector<T> h2(static_cast<std::size_t>(cfg_.ch2) * R2 * R2);
    res_fwd(p, enc2_, p1.data(), R2, tape.enc2, h2.data());

    std::vector<T> p2(static_cast<std::size_t>(cfg_.ch2) * R4 * R4);
    nn::avg_pool2_forward(h2.data(), nn::Dims{cfg_.ch2, R2, R2}, p2.data());
    std::vector<T> h3(static_cast<std::size_t>(cfg_.ch3) * R4 * R4);
    res_fwd(p, mid_, p2.data(), R4, tape.mid, h3.data());
    attn_fwd(p, attn_, h3.data(), R4, tape.attn);

    // Decoder: upsample, concatenate the skip, residual block.
    std::vector<T> cat2(static_cast<std::size_t>(cfg_.ch3 + cfg_.ch2) * R2 * R2);
    nn::upsample2_forward(h3.data(), nn::Dims{cfg_.ch3, R4, R4}, cat2.data());
    std::copy(h2.begin(), h2.end(), cat2.begin() + static_cast<std::ptrdiff_t>(cfg_.ch3) * R2 * R2);
    std::vector<T> dd2(static_cast<std::size_t>(cfg_.ch2) * R2 * R2);
    res_fwd(p, dec2_, cat2.data(), R2, tape.dec2, dd2.data());

    std::vector<T> cat1(static_cast<std::size_t>(cfg_.ch2 + cfg_.ch1) * R * R);
    nn::upsample2_forward(dd2.data(), nn::Dims{cfg_.ch2, R2, R2}, cat1.data());
    std::copy(h1.begin(), h1.end(), cat1.begin() + static_cast<std::ptrdiff_t>(cfg_.ch2) * R * R);
    std::vector<T> dd1(d1.size());
    res_fwd(p, dec1_, cat1.data(), R, tape.dec1, dd1.data());

    tape.out_pre.resize(d1.size());
    norm_fwd(p, out_norm_, dd1.data(), d1, tape.out_norm, tape.out_pre.data());
    std::vector<T> act(d1.size());
    nn::silu_forward(tape.out_pre.data(), act.size(), act.data());
    std::vector<T> out(output_size());
    conv_fwd(p, out_, act.data(), d1, tape.cols_out, out.data());
    return out;
  }

  std::vector<T> forward(const ParamSet<T>& p, std::span<const T> input, double s) const {
    Tape tape;
    return forward(p, input, s, tape);
  }

  // Accumulates d(loss)/d(params) into grads given d(loss)/d(output).
  void backward(const ParamSet<T>& p, const Tape& tape, std::span<const T> dout, ParamSet<T>& grads) const {
    if (dout.size() != output_size()) throw ContractError("denoiser backward: gradient has wrong size");
    const int R = cfg_.resolution;
    const int R2 = R / 2;
    const int R4 = R / 4;
    const nn::Dims d1{cfg_.ch1, R, R};

    std::vector<T> dact(d1.size(), T(0));
    conv_bwd(p, grads, out_, dout.data(), d1, tape.cols_out, dact.data());
    std::vector<T> dpre(d1.size(), T(0));
    nn::silu_backward(tape.out_pre.data(), dact.data(), dact.size(), dpre.data());
    std::vector<T> ddd1(d1.size(), T(0));
    norm_bwd(p, grads, out_norm_, dpre.data(), d1, tape.out_norm, ddd1.data());

    std::vector<T> dcat1(static_cast<std::size_t>(cfg_.ch2 + cfg_.ch1) * R * R, T(0));
    res_bwd(p, grads, dec1_, ddd1.data(), R, tape.dec1, dcat1.data());
    std::vector<T> dh1(dcat1.begin() + static_cast<std::ptrdiff_t>(cfg_.ch2) * R * R, dcat1.end());
    std::vector<T> ddd2(static_cast<std::size_t>(cfg_.ch2) * R2 * R2, T(0));
    nn::upsample2_backward(dcat1.data(), nn::Dims{cfg_.ch2, R2, R2}, ddd2.data());

    std::vector<T> dcat2(static_cast<std::size_t>(cfg_.ch3 + cfg_.ch2) * R2 * R2, T(0));
    res_bwd(p, grads, dec2_, ddd2.data(), R2, tape.dec2, dcat2.data());
    std::vector<T> dh2(dcat2.begin() + static_cast<std::ptrdiff_t>(cfg_.ch3) * R2 * R2, dcat2.end());
    std::vector<T> dh3(static_cast<std::size_t>(cfg_.ch3) * R4 * R4, T(0));
    nn::upsample2_backward(dcat2.data(), nn::Dims{cfg_.ch3, R4, R4}, dh3.data());

    attn_bwd(p, grads, attn_, dh3, R4, tape.attn);
    std::vector<T> dp2(static_cast<std::size_t>(cfg_.ch2) * R4 * R4, T(0));
    res_bwd(p, grads, mid_, dh3.data(), R4, tape.mid, dp2.data());
    nn::avg_pool2_backward(dp2.data(), nn::Dims{cfg_.ch2, R2, R2}, dh2.data());

    std::vector<T> dp1(static_cast<std::size_t>(cfg_.ch1) * R2 * R2, T(0));
    res_bwd(p, grads, enc2_, dh2.data(), R2, tape.enc2, dp1.data());
    nn::avg_pool2_backward(dp1.data(), d1, dh1.data());

    // Timestep embedding branch.
    std::vector<T> dtemb(cfg_.ch1, T(0));
    for (int c = 0; c < cfg_.ch1; ++c) {
      const T* row = dh1.data() + static_cast<std::size_t>(c) * d1.hw();
      T acc = 0;
      for (int i = 0; i < d1.hw(); ++i) acc += row[i];
      dtemb[c] = acc;
    }
    std::vector<T> dhidden(cfg_.temb_hidden, T(0));
    nn::linear_backward(tape.temb_hidden.data(), temb2_.in, p[temb2_.w].data.data(), temb2_.out, dtemb.data(),
                        grads[temb2_.w].data.data(), grads[temb2_.b].data.data(), dhidden.data());
    std::vector<T> dhidden_pre(cfg_.temb_hidden, T(0));
    nn::silu_backward(tape.temb_hidden_pre.data(), dhidden.data(), dhidden.size(), dhidden_pre.data());
    nn::linear_backward<T>(tape.temb_in.data(), temb1_.in, p[temb1_.w].data.data(), temb1_.out, dhidden_pre.data(),
                           grads[temb1_.w].data.data(), grads[temb1_.b].data.data(), nullptr);

    std::vector<T> dh0(d1.size(), T(0));
    res_bwd(p, grads, enc1_, dh1.data(), R, tape.enc1, dh0.data());
    conv_bwd(p, grads, stem_, dh0.data(), nn::Dims{cfg_.in_channels(), R, R}, tape.cols_stem, nullptr);
  }

 private:
  ConvIdx add_conv(ParamSet<T>& p, const std::string& name, int cin, int cout, int k) {
    ConvIdx c{cin, cout, k, 0, 0};
    c.w = p.add(name + ".w", {static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                              static_cast<std::size_t>(k), static_cast<std::size_t>(k)});
    c.b = p.add(name + ".b", {static_cast<std::size_t>(cout)});
    return c;
  }
  NormIdx add_norm(ParamSet<T>& p, const std::string& name, int c) {
    NormIdx n{c, 0, 0};
    n.gamma = p.add(name + ".gamma", {static_cast<std::size_t>(c)});
    n.beta = p.add(name + ".beta", {static_cast<std::size_t>(c)});
    return n;
  }
  LinearIdx add_linear(ParamSet<T>& p, const std::string& name, int in, int out) {
    LinearIdx l{in, out, 0, 0};
    l.w = p.add(name + ".w", {static_cast<std::size_t>(out), static_cast<std::size_t>(in)});
    l.b = p.add(name + ".b", {static_cast<std::size_t>(out)});
    return l;
  }
  ResIdx add_res(ParamSet<T>& p, const std::string& name, int cin, int cout) {
    ResIdx r;
    r.cin = cin;
    r.cout = cout;
    r.n1 = add_norm(p, name + ".norm1", cin);
    r.c1 = add_conv(p, name + ".conv1", cin, cout, 3);
    r.n2 = add_norm(p, name + ".norm2", cout);
    r.c2 = add_conv(p, name + ".conv2", cout, cout, 3);
    r.has_skip = cin != cout;
    if (r.has_skip) r.skip = add_conv(p, name + ".skip", cin, cout, 1);
    return r;
  }

  void build(ParamSet<T>& p) {
    stem_ = add_conv(p, "stem", cfg_.in_channels(), cfg_.ch1, 3);
    temb1_ = add_linear(p, "temb.fc1", cfg_.temb_dim, cfg_.temb_hidden);
    temb2_ = add_linear(p, "temb.fc2", cfg_.temb_hidden, cfg_.ch1);
    enc1_ = add_res(p, "enc1", cfg_.ch1, cfg_.ch1);
    enc2_ = add_res(p, "enc2", cfg_.ch1, cfg_.ch2);
    mid_ = add_res(p, "mid", cfg_.ch2, cfg_.ch3);
    attn_.c = cfg_.ch3;
    attn_.norm = add_norm(p, "mid_attn.norm", cfg_.ch3);
    attn_.qkv = add_conv(p, "mid_attn.qkv", cfg_.ch3, 3 * cfg_.ch3, 1);
    attn_.proj = add_conv(p, "mid_attn.proj", cfg_.ch3, cfg_.ch3, 1);
    dec2_ = add_res(p, "dec2", cfg_.ch3 + cfg_.ch2, cfg_.ch2);
    dec1_ = add_res(p, "dec1", cfg_.ch2 + cfg_.ch1, cfg_.ch1);
    out_norm_ = add_norm(p, "out_norm", cfg_.ch1);
    out_ = add_conv(p, "out", cfg_.ch1, cfg_.out_channels(), 3);
  }

  static constexpr double kNormEps = 1e-5;

  void conv_fwd(const ParamSet<T>& p, const ConvIdx& c, const T* x, nn::Dims d, std::vector<T>& cols, T* y) const {
    nn::conv_forward(x, d, p[c.w].data.data(), p[c.b].data.data(), c.cout, c.k, cols, y);
  }
  void conv_bwd(const ParamSet<T>& p, ParamSet<T>& g, const ConvIdx& c, const T* dy, nn::Dims d,
                const std::vector<T>& cols, T* dx) const {
    nn::conv_backward(dy, d, p[c.w].data.data(), c.cout, c.k, cols, g[c.w].data.data(), g[c.b].data.data(), dx);
  }
  void norm_fwd(const ParamSet<T>& p, const NormIdx& n, const T* x, nn::Dims d, nn::GroupNormCache<T>& cache,
                T* y) const {
    nn::group_norm_forward(x, d, cfg_.groups, p[n.gamma].data.data(), p[n.beta].data.data(), static_cast<T>(kNormEps),
                           cache, y);
  }
  void norm_bwd(const ParamSet<T>& p, ParamSet<T>& g, const NormIdx& n, const T* dy, nn::Dims d,
                const nn::GroupNormCache<T>& cache, T* dx) const {
    nn::group_norm_backward(dy, d, cfg_.groups, p[n.gamma].data.data(), cache, g[n.gamma].data.data(),
                            g[n.beta].data.data(), dx);
  }

  void res_fwd(const ParamSet<T>& p, const ResIdx& r, const T* x, int res, ResCache& cache, T* y) const {
    const nn::Dims din{r.cin, res, res};
    const nn::Dims dout{r.cout, res, res};
    cache.a1.resize(din.size());
    norm_fwd(p, r.n1, x, din, cache.g1, cache.a1.data());
    std::vector<T> s1(din.size());
    nn::silu_forward(cache.a1.data(), s1.size(), s1.data());
    std::vector<T> h(dout.size());
    conv_fwd(p, r.c1, s1.data(), din, cache.cols1, h.data());
    cache.a2.resize(dout.size());
    norm_fwd(p, r.n2, h.data(), dout, cache.g2, cache.a2.data());
    std::vector<T> s2(dout.size());
    nn::silu_forward(cache.a2.data(), s2.size(), s2.data());
    conv_fwd(p, r.c2, s2.data(), dout, cache.cols2, y);
    if (r.has_skip) {
      std::vector<T> sk(dout.size());
      conv_fwd(p, r.skip, x, din, cache.cols_skip, sk.data());
      for (std::size_t i = 0; i < sk.size(); ++i) y[i] += sk[i];
    } else {
      for (std::size_t i = 0; i < dout.size(); ++i) y[i] += x[i];
    }
  }

  void res_bwd(const ParamSet<T>& p, ParamSet<T>& g, const ResIdx& r, const T* dy, int res, const ResCache& cache,
               T* dx) const {
    const nn::Dims din{r.cin, res, res};
    const nn::Dims dout{r.cout, res, res};
    if (r.has_skip) {
      conv_bwd(p, g, r.skip, dy, din, cache.cols_skip, dx);
    } else {
      for (std::size_t i = 0; i < din.size(); ++i) dx[i] += dy[i];
    }
    std::vector<T> ds2(dout.size(), T(0));
    conv_bwd(p, g, r.c2, dy, dout, cache.cols2, ds2.data());
    std::vector<T> da2(dout.size(), T(0));
    nn::silu_backward(cache.a2.data(), ds2.data(), ds2.size(), da2.data());
    std::vector<T> dh(dout.size(), T(0));
    norm_bwd(p, g, r.n2, da2.data(), dout, cache.g2, dh.data());
    std::vector<T> ds1(din.size(), T(0));
    conv_bwd(p, g, r.c1, dh.data(), din, cache.cols1, ds1.data());
    std::vector<T> da1(din.size(), T(0));
    nn::silu_backward(cache.a1.data(), ds1.data(), ds1.size(), da1.data());
    norm_bwd(p, g, r.n1, da1.data(), din, cache.g1, dx);
  }

  // In-place residual attention on x (C, res*res).
  void attn_fwd(const ParamSet<T>& p, const AttnIdx& a, T* x, int res, AttnCache& cache) const {
    const nn::Dims d{a.c, res, res};
    const int n = res * res;
    std::vector<T> normed(d.size());
    norm_fwd(p, a.norm, x, d, cache.g, normed.data());
    cache.qkv.resize(static_cast<std::size_t>(3) * d.size());
    conv_fwd(p, a.qkv, normed.data(), d, cache.cols_qkv, cache.qkv.data());
    std::vector<T> o(d.size());
    nn::attention_core_forward(cache.qkv.data(), a.c, n, cache.probs, o.data());
    std::vector<T> proj(d.size());
    conv_fwd(p, a.proj, o.data(), d, cache.cols_proj, proj.data());
    for (std::size_t i = 0; i < d.size(); ++i) x[i] += proj[i];
  }

  // dx is both the incoming gradient and the accumulated result.
  void attn_bwd(const ParamSet<T>& p, ParamSet<T>& g, const AttnIdx& a, std::vector<T>& dx, int res,
                const AttnCache& cache) const {
    const nn::Dims d{a.c, res, res};
    const int n = res * res;
    std::vector<T> dout = dx;
    std::vector<T> d_o(d.size(), T(0));
    conv_bwd(p, g, a.proj, dout.data(), d, cache.cols_proj, d_o.data());
    std::vector<T> dqkv(static_cast<std::size_t>(3) * d.size(), T(0));
    nn::attention_core_backward(cache.qkv.data(), a.c, n, cache.probs, d_o.data(), dqkv.data());
    std::vector<T> dnormed(d.size(), T(0));
    conv_bwd(p, g, a.qkv, dqkv.data(), d, cache.cols_qkv, dnormed.data());
    norm_bwd(p, g, a.norm, dnormed.data(), d, cache.g, dx.data());
  }

  UNetConfig cfg_;
  ConvIdx stem_, out_;
  LinearIdx temb1_, temb2_;
  ResIdx enc1_, enc2_, mid_, dec2_, dec1_;
  AttnIdx attn_;
  NormIdx out_norm_;
};

}  // namespace llbb
