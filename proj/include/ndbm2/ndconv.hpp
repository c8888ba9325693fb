#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ndbm2/tensor.hpp"

namespace ndbm2 {

/// Convolution over 1, 2 or 3 spatial axes of a (B, C, D1[, D2[, D3]]) tensor.
///
/// Weight layout:
///   depthwise: (C, k1[, k2[, k3]])
///   dense:     (C_out, C, k1[, k2[, k3]])
/// Bias, when present, has one entry per output channel.
template <typename T>
struct ConvSpec {
  std::vector<std::size_t> kernel;
  std::vector<std::size_t> stride;
  std::size_t channels = 0;
  bool depthwise = true;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  std::size_t spatial_rank() const { return kernel.size(); }
  std::size_t out_channels() const { return depthwise ? channels : weight.shape()[0]; }

  void validate() const {
    const std::size_t r = kernel.size();
    if (r < 1 || r > 3) throw ShapeError("conv kernel rank must be 1, 2 or 3");
    if (stride.size() != r) throw ShapeError("conv stride rank differs from kernel rank");
    for (std::size_t i = 0; i < r; ++i) {
      if (kernel[i] < 1 || stride[i] < 1) throw RangeError("kernel and stride extents must be >= 1");
    }
    if (channels < 1) throw ShapeError("conv needs at least one channel");
    Shape expect;
    if (depthwise) {
      expect.push_back(channels);
    } else {
      expect.push_back(weight.shape()[0]);
      expect.push_back(channels);
    }
    expect.insert(expect.end(), kernel.begin(), kernel.end());
    if (weight.shape() != expect) {
      throw ShapeError("conv weight shape " + shape_to_string(weight.shape()) + ", expected " +
                       shape_to_string(expect));
    }
    if (bias && bias->size() != out_channels()) {
      throw ShapeError("conv bias length differs from output channels");
    }
  }
};

/// Builds a depthwise spec with all-zero weights of the given geometry.
template <typename T>
ConvSpec<T> make_depthwise(std::size_t channels, std::vector<std::size_t> kernel,
                           std::vector<std::size_t> stride, bool with_bias = true) {
  ConvSpec<T> spec;
  Shape wshape{channels};
  wshape.insert(wshape.end(), kernel.begin(), kernel.end());
  spec.kernel = std::move(kernel);
  spec.stride = std::move(stride);
  spec.channels = channels;
  spec.depthwise = true;
  spec.weight = Tensor<T>(wshape);
  if (with_bias) spec.bias = Tensor<T>(Shape{channels});
  return spec;
}

/// Valid-mode output extent floor((D - k) / s) + 1.
inline std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride) {
  if (extent < kernel) {
    throw ShapeError("convolution input extent " + std::to_string(extent) +
                     " is smaller than kernel " + std::to_string(kernel) + " (empty output)");
  }
  return (extent - kernel) / stride + 1;
}

struct SamePadding {
  std::size_t left = 0;
  std::size_t right = 0;
  std::size_t total() const { return left + right; }
  friend bool operator==(const SamePadding&, const SamePadding&) = default;
};

/// Padding that makes a strided valid-mode convolution produce ceil(D / s)
/// outputs. The odd element of an asymmetric total goes on the right.
inline SamePadding same_padding(std::size_t extent, std::size_t kernel, std::size_t stride) {
  if (extent < 1 || kernel < 1 || stride < 1) throw RangeError("same_padding arguments must be >= 1");
  const std::size_t out = (extent + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > extent ? needed - extent : 0;
  return {total / 2, total - total / 2};
}

namespace detail {

// Convolution over the unified (B, C, D1, D2, D3) view; lower ranks are
// lifted by appending unit extents to both input and kernel.
template <typename T>
Tensor<T> conv_unified(const Tensor<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  const std::size_t r = spec.spatial_rank();
  if (x.rank() != r + 2) {
    throw ShapeError("conv" + std::to_string(r) + "d expects a rank-" + std::to_string(r + 2) +
                     " input, got " + shape_to_string(x.shape()));
  }
  if (x.shape()[1] != spec.channels) {
    throw ShapeError("conv input has " + std::to_string(x.shape()[1]) + " channels, spec expects " +
                     std::to_string(spec.channels));
  }
  std::array<std::size_t, 3> dim{1, 1, 1}, ker{1, 1, 1}, str{1, 1, 1}, out{1, 1, 1};
  for (std::size_t i = 0; i < r; ++i) {
    dim[i] = x.shape()[2 + i];
    ker[i] = spec.kernel[i];
    str[i] = spec.stride[i];
    out[i] = conv_output_extent(dim[i], ker[i], str[i]);
  }
  const std::size_t batch = x.shape()[0];
  const std::size_t cin = spec.channels;
  const std::size_t cout = spec.out_channels();
  Shape out_shape{batch, cout};
  for (std::size_t i = 0; i < r; ++i) out_shape.push_back(out[i]);
  Tensor<T> y(out_shape);

  const std::size_t in_plane = dim[0] * dim[1] * dim[2];
  const std::size_t out_plane = out[0] * out[1] * out[2];
  const std::size_t k_plane = ker[0] * ker[1] * ker[2];
  const T* px = x.data().data();
  const T* pw = spec.weight.data().data();
  T* py = y.data().data();

  parallel_for(batch * cout, [&](std::size_t bo) {
    const std::size_t b = bo / cout;
    const std::size_t oc = bo % cout;
    const T b0 = spec.bias ? (*spec.bias)[oc] : T{0};
    const std::size_t ic_begin = spec.depthwise ? oc : 0;
    const std::size_t ic_end = spec.depthwise ? oc + 1 : cin;
    T* dst = py + bo * out_plane;
    for (std::size_t i = 0; i < out[0]; ++i) {
      for (std::size_t j = 0; j < out[1]; ++j) {
        for (std::size_t l = 0; l < out[2]; ++l) {
          T acc = b0;
          for (std::size_t ic = ic_begin; ic < ic_end; ++ic) {
            const T* src = px + (b * cin + ic) * in_plane;
            const T* w = pw + (spec.depthwise ? oc : oc * cin + ic) * k_plane;
            for (std::size_t m = 0; m < ker[0]; ++m) {
              for (std::size_t n = 0; n < ker[1]; ++n) {
                const T* row = src + ((i * str[0] + m) * dim[1] + (j * str[1] + n)) * dim[2] +
                               l * str[2];
                const T* wrow = w + (m * ker[1] + n) * ker[2];
                for (std::size_t q = 0; q < ker[2]; ++q) acc += wrow[q] * row[q];
              }
            }
          }
          dst[(i * out[1] + j) * out[2] + l] = acc;
        }
      }
    }
  });
  return y;
}

}  // namespace detail

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const ConvSpec<T>& spec) {
  if (spec.spatial_rank() != 1) throw ShapeError("conv1d needs a 1-D kernel");
  return detail::conv_unified(x, spec);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec<T>& spec) {
  if (spec.spatial_rank() != 2) throw ShapeError("conv2d needs a 2-D kernel");
  return detail::conv_unified(x, spec);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvSpec<T>& spec) {
  if (spec.spatial_rank() != 3) throw ShapeError("conv3d needs a 3-D kernel");
  return detail::conv_unified(x, spec);
}

/// Dispatches on the spec's spatial rank.
template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ConvSpec<T>& spec) {
  return detail::conv_unified(x, spec);
}

/// Zero-pads every spatial axis by same_padding for the spec's kernel/stride.
template <typename T>
Tensor<T> pad_same(const Tensor<T>& x, const ConvSpec<T>& spec) {
  if (x.rank() != spec.spatial_rank() + 2) throw ShapeError("pad_same: rank mismatch");
  Tensor<T> out = x;
  for (std::size_t i = 0; i < spec.spatial_rank(); ++i) {
    const auto p = same_padding(x.shape()[2 + i], spec.kernel[i], spec.stride[i]);
    out = pad_zero(out, 2 + i, p.left, p.right);
  }
  return out;
}

/// GELU(W * X + b) with same padding: one direction of the premix stage.
template <typename T>
Tensor<T> directional_path(const Tensor<T>& x, const ConvSpec<T>& spec) {
  return gelu(conv(pad_same(x, spec), spec));
}

}  // namespace ndbm2
