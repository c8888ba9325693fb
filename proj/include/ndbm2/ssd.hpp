#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ndbm2/tensor.hpp"

namespace ndbm2 {

enum class Activation { kGelu, kSilu };

inline const char* to_string(Activation a) { return a == Activation::kGelu ? "gelu" : "silu"; }

inline Activation activation_from_string(std::string_view s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "silu") return Activation::kSilu;
  throw ValidationError("unknown activation '" + std::string(s) + "'");
}

template <typename T>
T activate(T x, Activation a) {
  if (a == Activation::kGelu) return gelu_scalar(x);
  return x / (T(1) + std::exp(-x));
}

/// Hyperparameters of one directional selective state-space core.
struct Mamba2Config {
  std::size_t d_model = 128;
  std::size_t expand = 2;
  std::size_t d_state = 128;
  std::size_t headdim = 64;
  std::size_t d_conv = 4;
  std::size_t chunk = 64;
  std::size_t ngroups = 1;
  Activation activation = Activation::kGelu;
  double norm_eps = 1e-5;

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t nheads() const { return d_inner() / headdim; }
  /// Channels that pass through the causal conv: x, B and C.
  std::size_t conv_channels() const { return d_inner() + 2 * ngroups * d_state; }
  /// Output width of in_proj: z, xBC and dt.
  std::size_t in_proj_width() const { return d_inner() + conv_channels() + nheads(); }

  void validate() const {
    if (d_model < 1 || expand < 1 || d_state < 1 || headdim < 1) {
      throw ValidationError("Mamba2Config: dimensions must be >= 1");
    }
    if (d_inner() % headdim != 0) throw ValidationError("Mamba2Config: d_inner not divisible by headdim");
    if (chunk < 1 || d_conv < 1) throw ValidationError("Mamba2Config: chunk and d_conv must be >= 1");
    if (ngroups < 1 || nheads() % ngroups != 0) {
      throw ValidationError("Mamba2Config: nheads must be divisible by ngroups");
    }
  }

  friend bool operator==(const Mamba2Config&, const Mamba2Config&) = default;
};

template <typename T>
struct Mamba2Weights {
  Tensor<T> in_proj;      // (d_model, in_proj_width), no bias
  Tensor<T> conv_weight;  // (conv_channels, d_conv)
  Tensor<T> conv_bias;    // (conv_channels)
  Tensor<T> dt_bias;      // (nheads)
  Tensor<T> A_log;        // (nheads); decay rate A = -exp(A_log)
  Tensor<T> D_skip;       // (nheads)
  Tensor<T> norm_gain;    // (d_inner)
  Tensor<T> out_proj;     // (d_inner, d_model), no bias

  Mamba2Weights() = default;

  /// All-zero weights shaped for cfg.
  explicit Mamba2Weights(const Mamba2Config& cfg)
      : in_proj({cfg.d_model, cfg.in_proj_width()}),
        conv_weight({cfg.conv_channels(), cfg.d_conv}),
        conv_bias({cfg.conv_channels()}),
        dt_bias({cfg.nheads()}),
        A_log({cfg.nheads()}),
        D_skip({cfg.nheads()}),
        norm_gain({cfg.d_inner()}),
        out_proj({cfg.d_inner(), cfg.d_model}) {}

  /// Visits (name, tensor) pairs in declaration order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  void validate(const Mamba2Config& cfg) const {
    const Mamba2Weights expect(cfg);
    std::vector<std::pair<std::string, Shape>> expected;
    expect.for_each([&](const char* name, const Tensor<T>& t) { expected.emplace_back(name, t.shape()); });
    std::size_t i = 0;
    for_each([&](const char* name, const Tensor<T>& t) {
      if (t.shape() != expected[i].second) {
        throw ValidationError(std::string("Mamba2Weights.") + name + " has shape " +
                              shape_to_string(t.shape()) + ", config requires " +
                              shape_to_string(expected[i].second));
      }
      ++i;
    });
  }

  friend bool operator==(const Mamba2Weights&, const Mamba2Weights&) = default;

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn("in_proj", self.in_proj);
    fn("conv_weight", self.conv_weight);
    fn("conv_bias", self.conv_bias);
    fn("dt_bias", self.dt_bias);
    fn("A_log", self.A_log);
    fn("D_skip", self.D_skip);
    fn("norm_gain", self.norm_gain);
    fn("out_proj", self.out_proj);
  }
};

namespace detail {

struct ScanDims {
  std::size_t batch, len, heads, headdim, groups, state;
};

template <typename T>
ScanDims check_scan_args(const Tensor<T>& x, const Tensor<T>& dt, const Tensor<T>& A,
                         const Tensor<T>& Bm, const Tensor<T>& Cm, const Tensor<T>& D) {
  if (x.rank() != 4 || dt.rank() != 3 || Bm.rank() != 4 || Cm.rank() != 4) {
    throw ShapeError("ssd scan expects x (B,L,H,P), dt (B,L,H), B/C (B,L,G,N)");
  }
  ScanDims d{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], Bm.shape()[2], Bm.shape()[3]};
  if (dt.shape() != Shape{d.batch, d.len, d.heads}) throw ShapeError("ssd scan: dt shape mismatch");
  if (Bm.shape()[0] != d.batch || Bm.shape()[1] != d.len) throw ShapeError("ssd scan: B shape mismatch");
  if (Cm.shape() != Bm.shape()) throw ShapeError("ssd scan: C shape differs from B");
  if (A.size() != d.heads || D.size() != d.heads) throw ShapeError("ssd scan: A/D need one entry per head");
  if (d.heads % d.groups != 0) throw ShapeError("ssd scan: heads not divisible by groups");
  return d;
}

}  // namespace detail

/// Reference sequential recurrence, per batch and head:
///   a_t = exp(dt_t * A),  h_t = a_t h_{t-1} + dt_t x_t B_t^T,
///   y_t = h_t C_t + D x_t,  h_0 = 0.
template <typename T>
Tensor<T> ssd_scan_naive(const Tensor<T>& x, const Tensor<T>& dt, const Tensor<T>& A,
                         const Tensor<T>& Bm, const Tensor<T>& Cm, const Tensor<T>& D) {
  const auto d = detail::check_scan_args(x, dt, A, Bm, Cm, D);
  Tensor<T> y(x.shape());
  const std::size_t heads_per_group = d.heads / d.groups;
  parallel_for(d.batch * d.heads, [&](std::size_t bh) {
    const std::size_t b = bh / d.heads;
    const std::size_t h = bh % d.heads;
    const std::size_t g = h / heads_per_group;
    std::vector<T> state(d.headdim * d.state, T{0});
    for (std::size_t t = 0; t < d.len; ++t) {
      const T dtv = dt[(b * d.len + t) * d.heads + h];
      const T a = std::exp(dtv * A[h]);
      const T* xt = x.data().data() + ((b * d.len + t) * d.heads + h) * d.headdim;
      const T* bt = Bm.data().data() + ((b * d.len + t) * d.groups + g) * d.state;
      const T* ct = Cm.data().data() + ((b * d.len + t) * d.groups + g) * d.state;
      T* yt = y.data().data() + ((b * d.len + t) * d.heads + h) * d.headdim;
      for (std::size_t p = 0; p < d.headdim; ++p) {
        T* sp = state.data() + p * d.state;
        const T u = dtv * xt[p];
        T acc = 0;
        for (std::size_t n = 0; n < d.state; ++n) {
          sp[n] = a * sp[n] + u * bt[n];
          acc += sp[n] * ct[n];
        }
        yt[p] = acc + D[h] * xt[p];
      }
    }
  });
  return y;
}

/// Blockwise evaluation of the same recurrence. Within a chunk the output is
/// a decay-masked product of C B^T with dt x; across chunks only the
/// (P x N) state is carried, sequentially per (batch, head).
template <typename T>
Tensor<T> ssd_scan_chunked(const Tensor<T>& x, const Tensor<T>& dt, const Tensor<T>& A,
                           const Tensor<T>& Bm, const Tensor<T>& Cm, const Tensor<T>& D,
                           std::size_t chunk) {
  const auto d = detail::check_scan_args(x, dt, A, Bm, Cm, D);
  if (chunk < 1 || d.len % chunk != 0) {
    throw ContractError("ssd_scan_chunked: sequence length " + std::to_string(d.len) +
                        " is not divisible by chunk " + std::to_string(chunk));
  }
  const std::size_t nchunks = d.len / chunk;
  const std::size_t heads_per_group = d.heads / d.groups;
  const std::size_t pn = d.headdim * d.state;
  Tensor<T> y(x.shape());

  // seg[b][h][t]: cumulative dt*A from the chunk start through t.
  std::vector<T> seg(d.batch * d.heads * d.len);
  std::vector<T> states(d.batch * d.heads * nchunks * pn);
  std::vector<T> chunk_decay(d.batch * d.heads * nchunks);

  const T* px = x.data().data();
  const T* pB = Bm.data().data();
  const T* pC = Cm.data().data();
  T* py = y.data().data();
  auto x_at = [&](std::size_t b, std::size_t t, std::size_t h) {
    return px + ((b * d.len + t) * d.heads + h) * d.headdim;
  };
  auto y_at = [&](std::size_t b, std::size_t t, std::size_t h) {
    return py + ((b * d.len + t) * d.heads + h) * d.headdim;
  };
  auto grp_at = [&](const T* base, std::size_t b, std::size_t t, std::size_t g) {
    return base + ((b * d.len + t) * d.groups + g) * d.state;
  };

  // Intra-chunk outputs and chunk-local end states.
  parallel_for(d.batch * d.heads * nchunks, [&](std::size_t task) {
    const std::size_t c = task % nchunks;
    const std::size_t bh = task / nchunks;
    const std::size_t b = bh / d.heads;
    const std::size_t h = bh % d.heads;
    const std::size_t g = h / heads_per_group;
    const std::size_t t0 = c * chunk;
    T* sg = seg.data() + bh * d.len + t0;
    T run = 0;
    for (std::size_t i = 0; i < chunk; ++i) {
      run += dt[(b * d.len + t0 + i) * d.heads + h] * A[h];
      sg[i] = run;
    }
    for (std::size_t i = 0; i < chunk; ++i) {
      const T* ct = grp_at(pC, b, t0 + i, g);
      T* yt = y_at(b, t0 + i, h);
      for (std::size_t j = 0; j <= i; ++j) {
        const T* bs = grp_at(pB, b, t0 + j, g);
        T cb = 0;
        for (std::size_t n = 0; n < d.state; ++n) cb += ct[n] * bs[n];
        const T w = cb * std::exp(sg[i] - sg[j]) * dt[(b * d.len + t0 + j) * d.heads + h];
        const T* xs = x_at(b, t0 + j, h);
        for (std::size_t p = 0; p < d.headdim; ++p) yt[p] += w * xs[p];
      }
    }
    T* st = states.data() + task * pn;
    const T end = sg[chunk - 1];
    for (std::size_t j = 0; j < chunk; ++j) {
      const T coef = std::exp(end - sg[j]) * dt[(b * d.len + t0 + j) * d.heads + h];
      const T* xs = x_at(b, t0 + j, h);
      const T* bs = grp_at(pB, b, t0 + j, g);
      for (std::size_t p = 0; p < d.headdim; ++p) {
        const T u = coef * xs[p];
        T* row = st + p * d.state;
        for (std::size_t n = 0; n < d.state; ++n) row[n] += u * bs[n];
      }
    }
    chunk_decay[task] = std::exp(end);
  });

  // Carry states across chunks; states[c] becomes the state entering chunk c.
  parallel_for(d.batch * d.heads, [&](std::size_t bh) {
    std::vector<T> carry(pn, T{0});
    for (std::size_t c = 0; c < nchunks; ++c) {
      T* st = states.data() + (bh * nchunks + c) * pn;
      const T decay = chunk_decay[bh * nchunks + c];
      for (std::size_t k = 0; k < pn; ++k) {
        const T local = st[k];
        st[k] = carry[k];
        carry[k] = decay * carry[k] + local;
      }
    }
  });

  // Contribution of the carried state plus the skip term.
  parallel_for(d.batch * d.heads * nchunks, [&](std::size_t task) {
    const std::size_t c = task % nchunks;
    const std::size_t bh = task / nchunks;
    const std::size_t b = bh / d.heads;
    const std::size_t h = bh % d.heads;
    const std::size_t g = h / heads_per_group;
    const T* st = states.data() + task * pn;
    const bool first = c == 0;
    for (std::size_t i = 0; i < chunk; ++i) {
      const std::size_t t = c * chunk + i;
      const T* ct = grp_at(pC, b, t, g);
      const T* xt = x_at(b, t, h);
      T* yt = y_at(b, t, h);
      const T decay = std::exp(seg[bh * d.len + t]);
      for (std::size_t p = 0; p < d.headdim; ++p) {
        T acc = 0;
        if (!first) {
          const T* row = st + p * d.state;
          for (std::size_t n = 0; n < d.state; ++n) acc += ct[n] * row[n];
        }
        yt[p] += decay * acc + D[h] * xt[p];
      }
    }
  });
  return y;
}

/// Depthwise causal conv over (B, L, C): out[t] = act(bias + sum_j w[j] x[t - K + 1 + j]),
/// with zeros before t = 0. The last tap multiplies the current position.
template <typename T>
Tensor<T> causal_conv(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                      Activation act = Activation::kGelu) {
  if (x.rank() != 3) throw ShapeError("causal_conv expects (B, L, C)");
  const std::size_t batch = x.shape()[0], len = x.shape()[1], ch = x.shape()[2];
  if (weight.rank() != 2 || weight.shape()[0] != ch) throw ShapeError("causal_conv weight must be (C, K)");
  if (bias.size() != ch) throw ShapeError("causal_conv bias must have C entries");
  const std::size_t k = weight.shape()[1];
  Tensor<T> y(x.shape());
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  T* py = y.data().data();
  parallel_for(batch * len, [&](std::size_t bt) {
    const std::size_t b = bt / len;
    const std::size_t t = bt % len;
    T* out = py + bt * ch;
    for (std::size_t c = 0; c < ch; ++c) out[c] = bias[c];
    for (std::size_t j = 0; j < k; ++j) {
      if (t + j + 1 < k) continue;
      const std::size_t src_t = t + j + 1 - k;
      const T* in = px + (b * len + src_t) * ch;
      for (std::size_t c = 0; c < ch; ++c) out[c] += pw[c * k + j] * in[c];
    }
    for (std::size_t c = 0; c < ch; ++c) out[c] = activate(out[c], act);
  });
  return y;
}

namespace detail {

// Copies last-axis columns [begin, begin + width) of a (B, L, W) tensor.
template <typename T>
Tensor<T> take_columns(const Tensor<T>& t, std::size_t begin, std::size_t width) {
  const std::size_t w = t.shape().back();
  const std::size_t rows = t.size() / w;
  Shape shape = t.shape();
  shape.back() = width;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(t.data().data() + r * w + begin, width, out.data().data() + r * width);
  }
  return out;
}

}  // namespace detail

enum class ScanKind { kChunked, kNaive };

/// One directional core over a token sequence (B, L, d_model).
template <typename T>
Tensor<T> mamba2_forward(const Tensor<T>& x, const Mamba2Weights<T>& w, const Mamba2Config& cfg,
                         ScanKind scan = ScanKind::kChunked) {
  cfg.validate();
  w.validate(cfg);
  if (x.rank() != 3 || x.shape()[2] != cfg.d_model) {
    throw ShapeError("mamba2_forward expects (B, L, " + std::to_string(cfg.d_model) + "), got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t batch = x.shape()[0], len = x.shape()[1];
  const std::size_t di = cfg.d_inner(), nh = cfg.nheads(), gs = cfg.ngroups * cfg.d_state;
  if (scan == ScanKind::kChunked && len % cfg.chunk != 0) {
    throw ContractError("mamba2_forward: token count " + std::to_string(len) +
                        " is not divisible by chunk " + std::to_string(cfg.chunk));
  }

  const Tensor<T> zxbcdt = matmul(x, w.in_proj);
  const Tensor<T> z = detail::take_columns(zxbcdt, 0, di);
  const Tensor<T> xbc = causal_conv(detail::take_columns(zxbcdt, di, cfg.conv_channels()),
                                    w.conv_weight, w.conv_bias, cfg.activation);
  const Tensor<T> xs = reshape(detail::take_columns(xbc, 0, di), {batch, len, nh, cfg.headdim});
  const Tensor<T> Bm = reshape(detail::take_columns(xbc, di, gs), {batch, len, cfg.ngroups, cfg.d_state});
  const Tensor<T> Cm = reshape(detail::take_columns(xbc, di + gs, gs), {batch, len, cfg.ngroups, cfg.d_state});
  const Tensor<T> dt = softplus(add_bias(detail::take_columns(zxbcdt, di + cfg.conv_channels(), nh), w.dt_bias));
  const Tensor<T> A = map(w.A_log, [](T v) { return -std::exp(v); });

  Tensor<T> y = scan == ScanKind::kChunked ? ssd_scan_chunked(xs, dt, A, Bm, Cm, w.D_skip, cfg.chunk)
                                           : ssd_scan_naive(xs, dt, A, Bm, Cm, w.D_skip);
  y = reshape(y, {batch, len, di});
  const Activation act = cfg.activation;
  y = zip(y, z, [act](T a, T g) { return a * activate(g, act); }, "gate");
  y = rmsnorm(y, w.norm_gain, static_cast<T>(cfg.norm_eps));
  return matmul(y, w.out_proj);
}

}  // namespace ndbm2
