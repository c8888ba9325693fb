#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ndbm2/tensor.hpp"

namespace ndbm2 {

/// Per-axis alignment multiple: 64 for 1-D, 8 for 2-D, 4 for 3-D. In every
/// case the flattened token count becomes a multiple of 64 = 64^1 = 8^2 = 4^3.
inline std::size_t multiple_for(std::size_t spatial_rank) {
  switch (spatial_rank) {
    case 1:
      return 64;
    case 2:
      return 8;
    case 3:
      return 4;
    default:
      throw RangeError("spatial rank must be 1, 2 or 3, got " + std::to_string(spatial_rank));
  }
}

/// Token count every aligned input is divisible by.
inline constexpr std::size_t kAlignedTokenMultiple = 64;

struct PadRecord {
  Shape original_shape;  // spatial extents only
  Shape padded_shape;
  std::vector<std::size_t> per_axis_amount;
  std::vector<PadMode> mode_used;

  bool unchanged() const { return original_shape == padded_shape; }
  std::size_t tokens() const { return shape_product(padded_shape); }
};

/// Computes the alignment for a spatial shape without touching data.
inline PadRecord plan_alignment(const Shape& spatial) {
  const std::size_t m = multiple_for(spatial.size());
  PadRecord rec;
  rec.original_shape = spatial;
  for (std::size_t d : spatial) {
    if (d < 1) throw ShapeError("spatial extents must be >= 1");
    const std::size_t padded = (d + m - 1) / m * m;
    const std::size_t amount = padded - d;
    rec.padded_shape.push_back(padded);
    rec.per_axis_amount.push_back(amount);
    // Reflect cannot supply more than d - 1 values.
    rec.mode_used.push_back(amount <= d - 1 ? PadMode::kReflect : PadMode::kReplicate);
  }
  return rec;
}

/// Pads the spatial axes of (B, C, spatial...) at their trailing edge.
template <typename T>
std::pair<Tensor<T>, PadRecord> align_pad(const Tensor<T>& x, std::size_t spatial_rank) {
  if (x.rank() != spatial_rank + 2) {
    throw ShapeError("align_pad: expected (B, C) plus " + std::to_string(spatial_rank) +
                     " spatial axes, got " + shape_to_string(x.shape()));
  }
  Shape spatial(x.shape().begin() + 2, x.shape().end());
  PadRecord rec = plan_alignment(spatial);
  Tensor<T> out = x;
  for (std::size_t i = 0; i < spatial_rank; ++i) {
    out = pad_trailing(out, 2 + i, rec.per_axis_amount[i], rec.mode_used[i]);
  }
  return {std::move(out), std::move(rec)};
}

template <typename T>
Tensor<T> align_trim(const Tensor<T>& y, const PadRecord& rec) {
  const std::size_t r = rec.padded_shape.size();
  if (y.rank() != r + 2 || !std::equal(rec.padded_shape.begin(), rec.padded_shape.end(),
                                       y.shape().begin() + 2)) {
    throw ShapeError("align_trim: tensor " + shape_to_string(y.shape()) +
                     " does not match padded spatial shape " + shape_to_string(rec.padded_shape));
  }
  Tensor<T> out = y;
  for (std::size_t i = 0; i < r; ++i) out = trim_trailing(out, 2 + i, rec.per_axis_amount[i]);
  return out;
}

}  // namespace ndbm2
