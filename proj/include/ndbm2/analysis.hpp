#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ndbm2/align.hpp"
#include "ndbm2/pipeline.hpp"
#include "ndbm2/random.hpp"

namespace ndbm2 {

/// Which layers contribute to macs_total.
///
/// kLayers counts the weight-bearing linear and convolution layers only, the
/// convention layer-hook profilers use. kFull also counts the selective scan
/// (as naive-recurrence work) and the gating/normalization elementwise work.
/// Under kLayers those rows keep their params but report 0 MACs, and their
/// MACs are listed under `informational` instead.
enum class MacConvention { kLayers, kFull };

inline const char* to_string(MacConvention c) { return c == MacConvention::kLayers ? "layers" : "full"; }

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::uint64_t params_total = 0;
  std::uint64_t macs_total = 0;
  std::vector<LayerCost> per_layer;
  std::vector<LayerCost> informational;
  std::uint64_t tokens = 0;  // batch * aligned token count
  std::optional<double> wall_ms;
  int threads = 1;
  MacConvention convention = MacConvention::kLayers;

  double gmacs() const { return static_cast<double>(macs_total) * 1e-9; }

  const LayerCost* find(std::string_view name) const {
    for (const auto& l : per_layer) {
      if (l.name == name) return &l;
    }
    for (const auto& l : informational) {
      if (l.name == name) return &l;
    }
    return nullptr;
  }
};

namespace detail {

struct CostRow {
  LayerCost cost;
  bool parametric;
};

inline void push_core_rows(std::vector<CostRow>& rows, const std::string& prefix,
                           const Mamba2Config& cfg, std::uint64_t tokens) {
  const std::uint64_t dm = cfg.d_model, di = cfg.d_inner(), nh = cfg.nheads();
  const std::uint64_t p = cfg.headdim, n = cfg.d_state, cc = cfg.conv_channels();
  const std::uint64_t k = cfg.d_conv, width = cfg.in_proj_width();
  rows.push_back({{prefix + ".in_proj", dm * width, tokens * dm * width}, true});
  rows.push_back({{prefix + ".conv1d", cc * k + cc, tokens * cc * k}, true});
  // State update and output contraction per (head, p, n), plus the skip term.
  rows.push_back({{prefix + ".ssd_scan", 3 * nh, tokens * (2 * nh * p * n + nh * p)}, false});
  // Gate multiply, mean-square accumulation, gain multiply.
  rows.push_back({{prefix + ".gate_norm", di, tokens * 3 * di}, false});
  rows.push_back({{prefix + ".out_proj", di * dm, tokens * di * dm}, true});
}

template <typename T>
std::vector<CostRow> cost_rows(const BiMamba2NdModel<T>& model, std::uint64_t tokens) {
  std::vector<CostRow> rows;
  const std::uint64_t dm = model.cfg.d_model;
  rows.push_back({{"fc_in", model.c_in * dm + dm, tokens * model.c_in * dm}, true});
  if (model.premix) {
    for (auto [name, spec] : {std::pair{"premix_fwd", &model.premix->forward},
                              std::pair{"premix_bwd", &model.premix->backward}}) {
      if (!model.bidirectional && spec == &model.premix->backward) continue;
      const std::uint64_t taps = shape_product(spec->kernel);
      rows.push_back({{name, spec->channels * taps + spec->channels, tokens * spec->channels * taps}, true});
    }
  }
  push_core_rows(rows, "core_fwd", model.cfg, tokens);
  if (model.bidirectional) push_core_rows(rows, "core_bwd", model.cfg, tokens);
  rows.push_back({{"fc_out", dm * model.c_out + model.c_out, tokens * dm * model.c_out}, true});
  return rows;
}

}  // namespace detail

/// Closed-form parameter count per layer. Independent of input size.
template <typename T>
CostReport count_params(const BiMamba2NdModel<T>& model) {
  CostReport r;
  for (auto& row : detail::cost_rows(model, 0)) {
    r.params_total += row.cost.params;
    r.per_layer.push_back({row.cost.name, row.cost.params, 0});
  }
  return r;
}

/// Parameters of the layers shared by both directions (FC_in and FC_out).
template <typename T>
std::uint64_t count_fc_params(const BiMamba2NdModel<T>& model) {
  const std::uint64_t dm = model.cfg.d_model;
  return model.c_in * dm + dm + dm * model.c_out + model.c_out;
}

/// Analytical multiply-accumulate count for one forward at `input_shape`
/// (B, C, spatial...), evaluated at the aligned token count.
template <typename T>
CostReport count_macs(const BiMamba2NdModel<T>& model, const Shape& input_shape,
                      MacConvention convention = MacConvention::kLayers) {
  if (input_shape.size() != model.spatial_rank + 2) {
    throw ShapeError("count_macs: input shape rank does not match the model");
  }
  const Shape spatial(input_shape.begin() + 2, input_shape.end());
  const PadRecord rec = plan_alignment(spatial);
  CostReport r;
  r.convention = convention;
  r.tokens = input_shape[0] * rec.tokens();
  for (auto& row : detail::cost_rows(model, r.tokens)) {
    r.params_total += row.cost.params;
    if (row.parametric || convention == MacConvention::kFull) {
      r.macs_total += row.cost.macs;
      r.per_layer.push_back(row.cost);
    } else {
      r.per_layer.push_back({row.cost.name, row.cost.params, 0});
      r.informational.push_back({row.cost.name, 0, row.cost.macs});
    }
  }
  // Extra work of the blockwise scan over the naive recurrence: the masked
  // C B^T products and their application to x, per head and chunk.
  const std::uint64_t q = model.cfg.chunk;
  const std::uint64_t chunks = r.tokens / q;
  const std::uint64_t per_chunk = q * (q + 1) / 2 * (model.cfg.d_state + model.cfg.headdim);
  const std::uint64_t cores = model.bidirectional ? 2 : 1;
  r.informational.push_back({"chunked_scan_overhead", 0, cores * chunks * model.cfg.nheads() * per_chunk});
  return r;
}

/// Median wall time of `repeats` forwards after `warmup` discarded runs, on a
/// fixed-seed Gaussian input.
template <typename T>
CostReport bench(const BiMamba2NdModel<T>& model, const Shape& input_shape, std::size_t repeats,
                 std::size_t warmup, std::uint64_t input_seed = 0,
                 MacConvention convention = MacConvention::kLayers) {
  if (repeats < 1) throw RangeError("bench needs repeats >= 1");
  CostReport r = count_macs(model, input_shape, convention);
  r.threads = num_threads();
  const Tensor<T> x = random_normal<T>(input_shape, input_seed);
  for (std::size_t i = 0; i < warmup; ++i) (void)forward(model, x);
  std::vector<double> times;
  times.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor<T> y = forward(model, x);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (y.size() == 0) throw Error("empty forward output");
  }
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  r.wall_ms = times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  return r;
}

/// Locale-independent shortest round-trip text for a double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_fixed(double v, int precision) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, precision);
  return std::string(buf, res.ptr);
}

/// One `layer<TAB>params<TAB>macs` row per counted layer, then a `total` row.
inline std::string format_tsv(const CostReport& r) {
  std::string out;
  for (const auto& l : r.per_layer) {
    out += l.name + '\t' + std::to_string(l.params) + '\t' + std::to_string(l.macs) + '\n';
  }
  out += "total\t" + std::to_string(r.params_total) + '\t' + std::to_string(r.macs_total) + '\n';
  return out;
}

inline std::string format_table(const CostReport& r) {
  std::size_t w = 5;
  for (const auto& l : r.per_layer) w = std::max(w, l.name.size());
  for (const auto& l : r.informational) w = std::max(w, l.name.size());
  auto pad = [](std::string s, std::size_t n, bool left) {
    if (s.size() < n) s = left ? s + std::string(n - s.size(), ' ') : std::string(n - s.size(), ' ') + s;
    return s;
  };
  auto line = [&](const LayerCost& l) {
    return pad(l.name, w, true) + "  " + pad(std::to_string(l.params), 10, false) + "  " +
           pad(std::to_string(l.macs), 14, false) + '\n';
  };
  std::string out = pad("layer", w, true) + "  " + pad("params", 10, false) + "  " +
                    pad("macs", 14, false) + '\n';
  for (const auto& l : r.per_layer) out += line(l);
  out += line({"total", r.params_total, r.macs_total});
  if (!r.informational.empty()) {
    out += "not counted (" + std::string(to_string(r.convention)) + " convention):\n";
    for (const auto& l : r.informational) out += line(l);
  }
  return out;
}

}  // namespace ndbm2
