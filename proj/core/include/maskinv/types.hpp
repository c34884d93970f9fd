// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace maskinv {

using Index = Eigen::Index;

// Row-major matrices so that token rows and flattened attention blocks are
// contiguous in memory.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Column-major matrix, used where per-column contiguity matters (batched
// embeddings, one column per mask).
template <class S>
using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// One layer's attention maps, heads x n x n, stored as (heads*n) x n with the
// rows of head h occupying the block [h*n, (h+1)*n).
template <class S>
struct AttnTensor {
  Index heads = 0;
  Index n = 0;
  Mat<S> data;

  AttnTensor() = default;
  AttnTensor(Index heads_, Index n_)
      : heads(heads_), n(n_), data(Mat<S>::Zero(heads_ * n_, n_)) {}

  auto head(Index h) { return data.middleRows(h * n, n); }
  auto head(Index h) const { return data.middleRows(h * n, n); }

  S& at(Index h, Index i, Index j) { return data(h * n + i, j); }
  S at(Index h, Index i, Index j) const { return data(h * n + i, j); }

  Index entries() const { return heads * n * n; }
};

// 8-bit single-channel raster, row-major, data[y*width + x].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t& at(int x, int y) {
    return data[static_cast<std::size_t>(y) * width + x];
  }
};

// 8-bit RGB raster, interleaved, data[3*(y*width + x) + c].
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t at(int x, int y, int c) const {
    return data[3 * (static_cast<std::size_t>(y) * width + x) + c];
  }
  std::uint8_t& at(int x, int y, int c) {
    return data[3 * (static_cast<std::size_t>(y) * width + x) + c];
  }
};

// Preprocessed model input: three channel planes of side x side values.
template <class S>
struct ImageTensor {
  int side = 0;
  std::vector<S> chw;

  ImageTensor() = default;
  explicit ImageTensor(int side_)
      : side(side_), chw(static_cast<std::size_t>(3) * side_ * side_, S(0)) {}

  S at(int c, int y, int x) const {
    return chw[(static_cast<std::size_t>(c) * side + y) * side + x];
  }
  S& at(int c, int y, int x) {
    return chw[(static_cast<std::size_t>(c) * side + y) * side + x];
  }
};

}  // namespace maskinv
