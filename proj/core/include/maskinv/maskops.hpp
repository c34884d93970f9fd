// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "maskinv/errors.hpp"
#include "maskinv/png_io.hpp"
#include "maskinv/types.hpp"

namespace maskinv {

// Binary query region: pixels hold 0/1 at image resolution, grid the soft
// token-resolution resample (empty until computed).
struct QueryMask {
  GrayImage pixels;
  Eigen::MatrixXd grid;

  long long area() const {
    long long a = 0;
    for (std::uint8_t v : pixels.data) a += v;
    return a;
  }
};

// Loads a binary mask from an 8-bit grayscale PNG; any nonzero pixel is
// foreground. Expected dims, when given, must match the file.
inline QueryMask load_mask(const std::string& path, int expect_width = -1,
                           int expect_height = -1) {
  QueryMask mask;
  mask.pixels = read_png_gray(path);
  if ((expect_width >= 0 && mask.pixels.width != expect_width) ||
      (expect_height >= 0 && mask.pixels.height != expect_height)) {
    throw ArgumentError("mask '" + path + "' is " +
                        std::to_string(mask.pixels.width) + "x" +
                        std::to_string(mask.pixels.height) +
                        " but the image is " + std::to_string(expect_width) +
                        "x" + std::to_string(expect_height));
  }
  for (auto& v : mask.pixels.data) v = v ? 1 : 0;
  return mask;
}

inline void save_mask(const std::string& path, const QueryMask& mask) {
  GrayImage out = mask.pixels;
  for (auto& v : out.data) v = v ? 255 : 0;
  write_png_gray(path, out);
}

// Soft downsample to the token grid: each cell holds the mean of its
// patch_size x patch_size pixel block, so cell sums times the patch area
// reproduce the pixel count exactly.
inline Eigen::MatrixXd resample_to_grid(const QueryMask& mask, int patch_size) {
  const int w = mask.pixels.width;
  const int h = mask.pixels.height;
  if (patch_size < 1 || w % patch_size != 0 || h % patch_size != 0) {
    throw ArgumentError("resample_to_grid: mask dims " + std::to_string(w) +
                        "x" + std::to_string(h) +
                        " are not divisible by patch size " +
                        std::to_string(patch_size));
  }
  const int gw = w / patch_size;
  const int gh = h / patch_size;
  Eigen::MatrixXd grid(gh, gw);
  const double inv_area = 1.0 / (static_cast<double>(patch_size) * patch_size);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      long long count = 0;
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          count += mask.pixels.at(gx * patch_size + px, gy * patch_size + py);
        }
      }
      grid(gy, gx) = static_cast<double>(count) * inv_area;
    }
  }
  return grid;
}

namespace detail {

// Summed-area table over the binary pixels; pixels outside the image count
// as background.
inline std::vector<long long> integral_image(const GrayImage& img) {
  const int w = img.width;
  const int h = img.height;
  std::vector<long long> sat(static_cast<std::size_t>(w + 1) * (h + 1), 0);
  auto at = [&](int x, int y) -> long long& {
    return sat[static_cast<std::size_t>(y) * (w + 1) + x];
  };
  for (int y = 1; y <= h; ++y) {
    for (int x = 1; x <= w; ++x) {
      at(x, y) = img.at(x - 1, y - 1) + at(x - 1, y) + at(x, y - 1) -
                 at(x - 1, y - 1);
    }
  }
  return sat;
}

inline long long window_sum(const std::vector<long long>& sat, int w, int h,
                            int x0, int y0, int x1, int y1) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, w - 1);
  y1 = std::min(y1, h - 1);
  if (x0 > x1 || y0 > y1) return 0;
  auto at = [&](int x, int y) {
    return sat[static_cast<std::size_t>(y) * (w + 1) + x];
  };
  return at(x1 + 1, y1 + 1) - at(x0, y1 + 1) - at(x1 + 1, y0) + at(x0, y0);
}

inline QueryMask morph(const QueryMask& mask, int radius, bool erode_op) {
  if (radius < 0) {
    throw ArgumentError("morphology: radius must be non-negative");
  }
  QueryMask out;
  out.pixels = GrayImage(mask.pixels.width, mask.pixels.height);
  if (radius == 0) {
    out.pixels = mask.pixels;
    return out;
  }
  const int w = mask.pixels.width;
  const int h = mask.pixels.height;
  const long long full = static_cast<long long>(2 * radius + 1) *
                         static_cast<long long>(2 * radius + 1);
  const auto sat = integral_image(mask.pixels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const long long s =
          window_sum(sat, w, h, x - radius, y - radius, x + radius, y + radius);
      out.pixels.at(x, y) = erode_op ? (s == full ? 1 : 0) : (s > 0 ? 1 : 0);
    }
  }
  return out;
}

}  // namespace detail

// Morphology with a square structuring element of side 2*radius + 1; pixels
// beyond the border count as background, so erosion also eats into regions
// touching the edge.
inline QueryMask erode(const QueryMask& mask, int radius) {
  return detail::morph(mask, radius, true);
}

inline QueryMask dilate(const QueryMask& mask, int radius) {
  return detail::morph(mask, radius, false);
}

// Fills the inclusive box [x0,x1] x [y0,y1] on a width x height canvas.
inline QueryMask box_to_mask(int x0, int y0, int x1, int y1, int width,
                             int height) {
  if (width < 1 || height < 1) {
    throw ArgumentError("box_to_mask: empty canvas");
  }
  if (x0 > x1 || y0 > y1) {
    throw ArgumentError("box_to_mask: inverted box corners");
  }
  if (x0 < 0 || y0 < 0 || x1 >= width || y1 >= height) {
    throw ArgumentError("box_to_mask: box exceeds canvas bounds");
  }
  QueryMask mask;
  mask.pixels = GrayImage(width, height);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      mask.pixels.at(x, y) = 1;
    }
  }
  return mask;
}

inline QueryMask box_to_mask(const std::array<int, 4>& box, int width,
                             int height) {
  return box_to_mask(box[0], box[1], box[2], box[3], width, height);
}

// Tight bounding box of the foreground as {x0, y0, x1, y1}; requires a
// nonempty mask.
inline std::array<int, 4> mask_bounds(const QueryMask& mask) {
  int x0 = mask.pixels.width, y0 = mask.pixels.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.pixels.height; ++y) {
    for (int x = 0; x < mask.pixels.width; ++x) {
      if (mask.pixels.at(x, y)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) throw ArgumentError("mask_bounds: empty mask");
  return {x0, y0, x1, y1};
}

}  // namespace maskinv
