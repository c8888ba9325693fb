#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ndbm2/error.hpp"
#include "ndbm2/parallel.hpp"

namespace ndbm2 {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 5;

inline std::size_t shape_product(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_to_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor of rank 1..5. Every operation returns a new
/// contiguous tensor; there are no views.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{1}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_product(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= rank()) throw RangeError("axis " + std::to_string(axis) + " out of range");
    return shape_[axis];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const& noexcept { return data_; }
  std::vector<T> vec() && noexcept { return std::move(data_); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw RangeError("index rank mismatch");
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw RangeError("index out of bounds");
      off = off * shape_[axis++] + i;
    }
    return off;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > kMaxRank) {
      throw ShapeError("tensor rank must be in [1, 5], got " + std::to_string(shape.size()));
    }
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_to_string(shape));
    }
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner) counts.
struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw RangeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(shape.size()));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape new_shape) {
  if (shape_product(new_shape) != t.size()) {
    throw ShapeError("reshape " + shape_to_string(t.shape()) + " -> " +
                     shape_to_string(new_shape) + ": element count differs");
  }
  return Tensor<T>(std::move(new_shape), t.vec());
}

/// out.shape[i] = t.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  const std::size_t r = t.rank();
  if (axes.size() != r) throw ShapeError("permute: axis list length differs from rank");
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw RangeError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r);
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = stride;
    stride *= t.shape()[i];
  }
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = t.shape()[axes[i]];
    src_strides[i] = in_strides[axes[i]];
  }
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  auto src = t.data();
  auto dst = out.data();
  std::size_t src_off = 0;
  for (std::size_t n = 0; n < dst.size(); ++n) {
    dst[n] = src[src_off];
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src_off += src_strides[d];
        break;
      }
      src_off -= src_strides[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return out;
}

template <typename T>
Tensor<T> flip(const Tensor<T>& t, std::size_t axis) {
  const auto s = detail::split_at(t.shape(), axis);
  Tensor<T> out(t.shape());
  auto src = t.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.extent; ++i) {
      const std::size_t from = (o * s.extent + i) * s.inner;
      const std::size_t to = (o * s.extent + (s.extent - 1 - i)) * s.inner;
      std::copy_n(src.begin() + from, s.inner, dst.begin() + to);
    }
  }
  return out;
}

enum class PadMode { kReflect, kReplicate, kZero };

inline const char* to_string(PadMode m) {
  switch (m) {
    case PadMode::kReflect:
      return "reflect";
    case PadMode::kReplicate:
      return "replicate";
    case PadMode::kZero:
      return "zero";
  }
  return "?";
}

/// Appends `amount` elements at the end of `axis`. Reflect mirrors without
/// repeating the edge element and needs amount <= extent - 1.
template <typename T>
Tensor<T> pad_trailing(const Tensor<T>& t, std::size_t axis, std::size_t amount, PadMode mode) {
  const auto s = detail::split_at(t.shape(), axis);
  if (mode == PadMode::kReflect && amount > s.extent - 1) {
    throw RangeError("reflect padding of " + std::to_string(amount) + " exceeds extent - 1 (" +
                     std::to_string(s.extent - 1) + ")");
  }
  if (amount == 0) return t;
  Shape out_shape = t.shape();
  out_shape[axis] += amount;
  Tensor<T> out(out_shape);
  const std::size_t n_out = out_shape[axis];
  auto src = t.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const auto* in = src.data() + o * s.extent * s.inner;
    auto* res = dst.data() + o * n_out * s.inner;
    std::copy_n(in, s.extent * s.inner, res);
    for (std::size_t j = 0; j < amount; ++j) {
      auto* row = res + (s.extent + j) * s.inner;
      switch (mode) {
        case PadMode::kReflect:
          std::copy_n(in + (s.extent - 2 - j) * s.inner, s.inner, row);
          break;
        case PadMode::kReplicate:
          std::copy_n(in + (s.extent - 1) * s.inner, s.inner, row);
          break;
        case PadMode::kZero:
          std::fill_n(row, s.inner, T{0});
          break;
      }
    }
  }
  return out;
}

/// Zero padding on both ends of `axis`.
template <typename T>
Tensor<T> pad_zero(const Tensor<T>& t, std::size_t axis, std::size_t before, std::size_t after) {
  const auto s = detail::split_at(t.shape(), axis);
  if (before == 0 && after == 0) return t;
  Shape out_shape = t.shape();
  out_shape[axis] += before + after;
  Tensor<T> out(out_shape);
  const std::size_t n_out = out_shape[axis];
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(t.data().data() + o * s.extent * s.inner, s.extent * s.inner,
                out.data().data() + (o * n_out + before) * s.inner);
  }
  return out;
}

template <typename T>
Tensor<T> trim_trailing(const Tensor<T>& t, std::size_t axis, std::size_t amount) {
  const auto s = detail::split_at(t.shape(), axis);
  if (amount >= s.extent) {
    throw RangeError("cannot trim " + std::to_string(amount) + " from extent " +
                     std::to_string(s.extent));
  }
  if (amount == 0) return t;
  Shape out_shape = t.shape();
  out_shape[axis] -= amount;
  Tensor<T> out(out_shape);
  const std::size_t keep = out_shape[axis] * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(t.data().data() + o * s.extent * s.inner, keep, out.data().data() + o * keep);
  }
  return out;
}

/// a: (..., M, K) with any leading batch axes; b: (K, N). Each output element
/// accumulates over K in ascending order, independent of thread count.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2) throw ShapeError("matmul expects a rank>=2, b rank 2");
  const std::size_t k_dim = a.shape().back();
  if (k_dim != b.shape()[0]) {
    throw ShapeError("matmul inner extents differ: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const std::size_t n_dim = b.shape()[1];
  const std::size_t rows = a.size() / k_dim;
  Shape out_shape = a.shape();
  out_shape.back() = n_dim;
  Tensor<T> out(out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data().data();
  constexpr std::size_t kRowBlock = 16;
  const std::size_t blocks = (rows + kRowBlock - 1) / kRowBlock;
  parallel_for(blocks, [&](std::size_t blk) {
    const std::size_t r0 = blk * kRowBlock;
    const std::size_t r1 = std::min(rows, r0 + kRowBlock);
    for (std::size_t i = r0; i < r1; ++i) {
      T* crow = pc + i * n_dim;
      const T* arow = pa + i * k_dim;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const T av = arow[k];
        const T* brow = pb + k * n_dim;
        for (std::size_t j = 0; j < n_dim; ++j) crow[j] += av * brow[j];
      }
    }
  });
  return out;
}

/// Adds a vector along the last axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& t, const Tensor<T>& bias) {
  const std::size_t n = t.shape().back();
  if (bias.size() != n) throw ShapeError("bias length differs from last extent");
  Tensor<T> out = t;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += bias[i % n];
  return out;
}

/// x @ w + bias, the fully connected layer.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
  Tensor<T> y = matmul(x, w);
  return bias ? add_bias(y, *bias) : y;
}

template <typename T, typename Fn>
Tensor<T> map(const Tensor<T>& t, Fn&& fn) {
  Tensor<T> out(t.shape());
  auto src = t.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

template <typename T, typename Fn>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, Fn&& fn, const char* what) {
  detail::require_same_shape(a, b, what);
  Tensor<T> out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = fn(pa[i], pb[i]);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::plus<T>(), "add");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::multiplies<T>(), "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return map(a, [s](T v) { return v * s; });
}

template <typename T>
T gelu_scalar(T x) {
  // x * Phi(x) with the exact normal CDF.
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T softplus_scalar(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& t) {
  return map(t, gelu_scalar<T>);
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& t) {
  return map(t, softplus_scalar<T>);
}

template <typename T>
Tensor<T> exp(const Tensor<T>& t) {
  return map(t, [](T v) { return std::exp(v); });
}

/// Normalizes every last-axis vector by its root mean square, then scales by gain.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& t, const Tensor<T>& gain, T eps) {
  const std::size_t n = t.shape().back();
  if (gain.size() != n) {
    throw ShapeError("rmsnorm gain length " + std::to_string(gain.size()) +
                     " differs from last extent " + std::to_string(n));
  }
  Tensor<T> out(t.shape());
  const std::size_t rows = t.size() / n;
  const T* src = t.data().data();
  T* dst = out.data().data();
  const T* g = gain.data().data();
  parallel_for(rows, [&](std::size_t r) {
    const T* x = src + r * n;
    T ss = 0;
    for (std::size_t i = 0; i < n; ++i) ss += x[i] * x[i];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t i = 0; i < n; ++i) dst[r * n + i] = x[i] * inv * g[i];
  });
  return out;
}

}  // namespace ndbm2
