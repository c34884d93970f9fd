// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>

#include "maskinv/types.hpp"

namespace maskinv {

// Catmull-Rom bicubic kernel (a = -0.5). Reproduces the value exactly when a
// destination sample lands on a source sample.
inline double bicubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
  return 0.0;
}

namespace detail {

struct BicubicTap {
  int base;          // leftmost source index of the 4-tap stencil
  double w[4];
};

// Destination -> source mapping. align_corners=true pins first and last
// samples to each other; align_corners=false uses pixel-center mapping.
// Sources outside the grid clamp to the border.
inline BicubicTap bicubic_tap(Index dst, Index in_size, Index out_size,
                              bool align_corners) {
  double pos;
  if (out_size <= 1) {
    pos = 0.5 * static_cast<double>(in_size - 1);
  } else if (align_corners) {
    pos = static_cast<double>(dst) * static_cast<double>(in_size - 1) /
          static_cast<double>(out_size - 1);
  } else {
    pos = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_size) /
              static_cast<double>(out_size) -
          0.5;
  }
  const double fl = std::floor(pos);
  BicubicTap tap;
  tap.base = static_cast<int>(fl) - 1;
  const double frac = pos - fl;
  for (int k = 0; k < 4; ++k) {
    tap.w[k] = bicubic_weight(static_cast<double>(k - 1) - frac);
  }
  return tap;
}

}  // namespace detail

// Resamples a 2D plane with separable Catmull-Rom interpolation.
template <class S>
Mat<S> bicubic_resample(const Mat<S>& src, Index out_rows, Index out_cols,
                        bool align_corners) {
  const Index in_rows = src.rows();
  const Index in_cols = src.cols();

  std::vector<detail::BicubicTap> col_taps(static_cast<std::size_t>(out_cols));
  for (Index x = 0; x < out_cols; ++x) {
    col_taps[static_cast<std::size_t>(x)] =
        detail::bicubic_tap(x, in_cols, out_cols, align_corners);
  }

  // Horizontal pass.
  Mat<S> tmp(in_rows, out_cols);
  for (Index y = 0; y < in_rows; ++y) {
    for (Index x = 0; x < out_cols; ++x) {
      const auto& tap = col_taps[static_cast<std::size_t>(x)];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        const Index sx = std::clamp<Index>(tap.base + k, 0, in_cols - 1);
        acc += tap.w[k] * static_cast<double>(src(y, sx));
      }
      tmp(y, x) = static_cast<S>(acc);
    }
  }

  // Vertical pass.
  Mat<S> out(out_rows, out_cols);
  for (Index y = 0; y < out_rows; ++y) {
    const auto tap = detail::bicubic_tap(y, in_rows, out_rows, align_corners);
    for (Index x = 0; x < out_cols; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        const Index sy = std::clamp<Index>(tap.base + k, 0, in_rows - 1);
        acc += tap.w[k] * static_cast<double>(tmp(sy, x));
      }
      out(y, x) = static_cast<S>(acc);
    }
  }
  return out;
}

}  // namespace maskinv
