#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>

#include "ndbm2/align.hpp"
#include "ndbm2/ndconv.hpp"
#include "ndbm2/random.hpp"
#include "ndbm2/ssd.hpp"
#include "ndbm2/tensor.hpp"

namespace ndbm2 {

/// Per-direction convolutions applied to the padded input before flattening.
template <typename T>
struct Premix {
  ConvSpec<T> forward;
  ConvSpec<T> backward;
};

/// Pad -> flatten -> FC_in -> forward/backward cores -> add -> FC_out -> unflatten -> trim.
template <typename T>
struct BiMamba2NdModel {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t spatial_rank = 1;
  bool bidirectional = false;
  Mamba2Config cfg;
  Tensor<T> fc_in_weight;   // (c_in, d_model)
  Tensor<T> fc_in_bias;     // (d_model)
  Tensor<T> fc_out_weight;  // (d_model, c_out)
  Tensor<T> fc_out_bias;    // (c_out)
  Mamba2Weights<T> core_forward;
  std::optional<Mamba2Weights<T>> core_backward;
  std::optional<Premix<T>> premix;

  void validate() const {
    cfg.validate();
    if (spatial_rank < 1 || spatial_rank > 3) throw ValidationError("spatial_rank must be 1, 2 or 3");
    if (c_in < 1 || c_out < 1) throw ValidationError("channel counts must be >= 1");
    if (bidirectional != core_backward.has_value()) {
      throw ValidationError("bidirectional flag and presence of the backward core disagree");
    }
    auto expect = [](const Tensor<T>& t, const Shape& s, const char* name) {
      if (t.shape() != s) {
        throw ValidationError(std::string(name) + " has shape " + shape_to_string(t.shape()) +
                              ", expected " + shape_to_string(s));
      }
    };
    expect(fc_in_weight, {c_in, cfg.d_model}, "fc_in.weight");
    expect(fc_in_bias, {cfg.d_model}, "fc_in.bias");
    expect(fc_out_weight, {cfg.d_model, c_out}, "fc_out.weight");
    expect(fc_out_bias, {c_out}, "fc_out.bias");
    core_forward.validate(cfg);
    if (core_backward) core_backward->validate(cfg);
    if (premix) {
      for (const ConvSpec<T>* spec : {&premix->forward, &premix->backward}) {
        spec->validate();
        if (spec->spatial_rank() != spatial_rank || !spec->depthwise || spec->channels != c_in) {
          throw ValidationError("premix must be a depthwise conv over c_in channels of matching rank");
        }
        for (std::size_t s : spec->stride) {
          if (s != 1) throw ValidationError("premix stride must be 1 to preserve the padded shape");
        }
      }
    }
  }

  friend bool operator==(const BiMamba2NdModel& a, const BiMamba2NdModel& b) {
    auto same_conv = [](const ConvSpec<T>& x, const ConvSpec<T>& y) {
      return x.kernel == y.kernel && x.stride == y.stride && x.channels == y.channels &&
             x.depthwise == y.depthwise && x.weight == y.weight && x.bias == y.bias;
    };
    if (a.premix.has_value() != b.premix.has_value()) return false;
    if (a.premix && !(same_conv(a.premix->forward, b.premix->forward) &&
                      same_conv(a.premix->backward, b.premix->backward))) {
      return false;
    }
    return a.c_in == b.c_in && a.c_out == b.c_out && a.spatial_rank == b.spatial_rank &&
           a.bidirectional == b.bidirectional && a.cfg == b.cfg && a.fc_in_weight == b.fc_in_weight &&
           a.fc_in_bias == b.fc_in_bias && a.fc_out_weight == b.fc_out_weight &&
           a.fc_out_bias == b.fc_out_bias && a.core_forward == b.core_forward &&
           a.core_backward == b.core_backward;
  }
};

/// Reverses the token axis of (B, L, d).
template <typename T>
Tensor<T> flip_tokens(const Tensor<T>& h) {
  if (h.rank() != 3) throw ShapeError("flip_tokens expects (B, L, d)");
  return flip(h, 1);
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& forward, const Tensor<T>& backward) {
  return add(forward, backward);
}

/// Fused core features for already mapped tokens (B, L, d_model). When the
/// model has a premix stage the backward core reads `mapped_backward`.
template <typename T>
Tensor<T> fused_features(const BiMamba2NdModel<T>& model, const Tensor<T>& mapped_forward,
                         const std::type_identity_t<Tensor<T>>* mapped_backward = nullptr,
                         ScanKind scan = ScanKind::kChunked) {
  Tensor<T> h_forward = mamba2_forward(mapped_forward, model.core_forward, model.cfg, scan);
  if (!model.bidirectional) return h_forward;
  const Tensor<T>& src = mapped_backward ? *mapped_backward : mapped_forward;
  Tensor<T> h_backward =
      flip_tokens(mamba2_forward(flip_tokens(src), *model.core_backward, model.cfg, scan));
  return fuse(h_forward, h_backward);
}

/// Token-level forward: (B, L, c_in) -> (B, L, c_out). L must already be aligned.
template <typename T>
Tensor<T> forward_tokens(const BiMamba2NdModel<T>& model, const Tensor<T>& tokens,
                         ScanKind scan = ScanKind::kChunked) {
  const Tensor<T> mapped = linear(tokens, model.fc_in_weight, &model.fc_in_bias);
  return linear(fused_features(model, mapped, nullptr, scan), model.fc_out_weight, &model.fc_out_bias);
}

namespace detail {

// (B, C, spatial...) -> (B, L, C) with row-major flattening of the spatial axes.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const std::size_t b = x.shape()[0], c = x.shape()[1];
  return permute(reshape(x, {b, c, x.size() / (b * c)}), {0, 2, 1});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& h, const Shape& spatial) {
  const std::size_t b = h.shape()[0], c = h.shape()[2];
  Shape shape{b, c};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  return reshape(permute(h, {0, 2, 1}), std::move(shape));
}

}  // namespace detail

/// (B, c_in, spatial...) -> (B, c_out, spatial...), spatial shape preserved.
template <typename T>
Tensor<T> forward(const BiMamba2NdModel<T>& model, const Tensor<T>& x,
                  ScanKind scan = ScanKind::kChunked) {
  model.validate();
  if (x.rank() != model.spatial_rank + 2) {
    throw ShapeError("model expects " + std::to_string(model.spatial_rank) +
                     " spatial axes, input is " + shape_to_string(x.shape()));
  }
  if (x.shape()[1] != model.c_in) {
    throw ShapeError("model expects " + std::to_string(model.c_in) + " input channels, got " +
                     std::to_string(x.shape()[1]));
  }
  auto [padded, rec] = align_pad(x, model.spatial_rank);

  Tensor<T> h;
  if (model.premix) {
    const Tensor<T> mapped_f = linear(detail::to_tokens(directional_path(padded, model.premix->forward)),
                                      model.fc_in_weight, &model.fc_in_bias);
    if (model.bidirectional) {
      const Tensor<T> mapped_b = linear(detail::to_tokens(directional_path(padded, model.premix->backward)),
                                        model.fc_in_weight, &model.fc_in_bias);
      h = fused_features(model, mapped_f, &mapped_b, scan);
    } else {
      h = fused_features(model, mapped_f, nullptr, scan);
    }
  } else {
    const Tensor<T> mapped = linear(detail::to_tokens(padded), model.fc_in_weight, &model.fc_in_bias);
    h = fused_features(model, mapped, nullptr, scan);
  }
  const Tensor<T> out = linear(h, model.fc_out_weight, &model.fc_out_bias);
  return align_trim(detail::from_tokens(out, rec.padded_shape), rec);
}

namespace detail {

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double bound) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
Mamba2Weights<T> init_core(const Mamba2Config& cfg, Rng& rng) {
  Mamba2Weights<T> w(cfg);
  fill_uniform(w.in_proj, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  fill_uniform(w.conv_weight, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_conv)));
  fill_uniform(w.conv_bias, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_conv)));
  for (auto& v : w.dt_bias.data()) {
    // softplus(dt_bias) lands in [1e-3, 1e-1], log-uniformly.
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  // A in [0.05, 0.65] keeps exp(-A) inside (0.5, 1) at dt = 1.
  for (auto& v : w.A_log.data()) v = static_cast<T>(std::log(rng.uniform(0.05, 0.65)));
  for (auto& v : w.D_skip.data()) v = T(1);
  for (auto& v : w.norm_gain.data()) v = T(1);
  fill_uniform(w.out_proj, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_inner())));
  return w;
}

template <typename T>
ConvSpec<T> init_premix(std::size_t channels, std::size_t rank, std::size_t kernel, Rng& rng) {
  ConvSpec<T> spec = make_depthwise<T>(channels, std::vector<std::size_t>(rank, kernel),
                                       std::vector<std::size_t>(rank, 1));
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape_product(spec.kernel)));
  fill_uniform(spec.weight, rng, bound);
  fill_uniform(*spec.bias, rng, bound);
  return spec;
}

}  // namespace detail

struct InitOptions {
  Mamba2Config cfg;
  std::size_t c_in = 64;
  std::size_t c_out = 64;
  std::size_t spatial_rank = 1;
  bool bidirectional = false;
  std::uint64_t seed = 0;
  std::size_t premix_kernel = 0;  // 0 disables the premix stage
};

/// Deterministic weights from a seed; each weight group draws from its own
/// stream, so a unidirectional and a bidirectional model with the same seed
/// share FC layers and the forward core.
template <typename T>
BiMamba2NdModel<T> init_random(const InitOptions& opt) {
  opt.cfg.validate();
  BiMamba2NdModel<T> m;
  m.c_in = opt.c_in;
  m.c_out = opt.c_out;
  m.spatial_rank = opt.spatial_rank;
  m.bidirectional = opt.bidirectional;
  m.cfg = opt.cfg;
  const std::size_t d = opt.cfg.d_model;

  Rng fc_rng(opt.seed * 0x9E3779B97F4A7C15ULL + 1);
  m.fc_in_weight = Tensor<T>({opt.c_in, d});
  m.fc_in_bias = Tensor<T>({d});
  m.fc_out_weight = Tensor<T>({d, opt.c_out});
  m.fc_out_bias = Tensor<T>({opt.c_out});
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(opt.c_in));
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(d));
  detail::fill_uniform(m.fc_in_weight, fc_rng, in_bound);
  detail::fill_uniform(m.fc_in_bias, fc_rng, in_bound);
  detail::fill_uniform(m.fc_out_weight, fc_rng, out_bound);
  detail::fill_uniform(m.fc_out_bias, fc_rng, out_bound);

  Rng fwd_rng(opt.seed * 0x9E3779B97F4A7C15ULL + 2);
  m.core_forward = detail::init_core<T>(opt.cfg, fwd_rng);
  if (opt.bidirectional) {
    Rng bwd_rng(opt.seed * 0x9E3779B97F4A7C15ULL + 3);
    m.core_backward = detail::init_core<T>(opt.cfg, bwd_rng);
  }
  if (opt.premix_kernel > 0) {
    Rng mix_rng(opt.seed * 0x9E3779B97F4A7C15ULL + 4);
    Premix<T> p;
    p.forward = detail::init_premix<T>(opt.c_in, opt.spatial_rank, opt.premix_kernel, mix_rng);
    p.backward = detail::init_premix<T>(opt.c_in, opt.spatial_rank, opt.premix_kernel, mix_rng);
    m.premix = std::move(p);
  }
  m.validate();
  return m;
}

}  // namespace ndbm2
