// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "maskinv/encoder.hpp"
#include "maskinv/errors.hpp"
#include "maskinv/model.hpp"
#include "maskinv/types.hpp"

namespace maskinv {

// Per-patch relevance of an embedding: grid holds the min-max normalized
// patch map, raw the unnormalized per-token scores including the class token.
template <class S>
struct ExplainabilityMap {
  Mat<S> grid;  // g x g, values in [0,1]; all zeros when degenerate
  Vec<S> raw;   // n entries, class token first
};

template <class S>
S score_dot(const Vec<S>& zbar, const Vec<S>& let) {
  if (zbar.size() != let.size()) {
    throw ArgumentError("score_dot: embedding sizes differ");
  }
  return zbar.dot(let);
}

template <class S>
S score_cos(const Vec<S>& a, const Vec<S>& b) {
  if (a.size() != b.size()) {
    throw ArgumentError("score_cos: embedding sizes differ");
  }
  const S na = a.norm();
  const S nb = b.norm();
  if (na == S(0) || nb == S(0)) {
    throw ArgumentError("score_cos: zero-norm embedding");
  }
  // Rounding can push the quotient past +-1 for near-parallel inputs, which
  // would make 1 - cos slightly negative downstream.
  return std::clamp(a.dot(b) / (na * nb), S(-1), S(1));
}

// Per-token relevance: mean over heads and rows of the positive part of the
// attention gradient, one entry per key position.
template <class S>
Vec<S> raw_map(const AttnTensor<S>& grad) {
  const Index n = grad.n;
  Vec<S> out = Vec<S>::Zero(n);
  const S norm = S(1) / static_cast<S>(grad.heads * n);
  for (Index r = 0; r < grad.data.rows(); ++r) {
    for (Index j = 0; j < n; ++j) {
      const S g = grad.data(r, j);
      if (g > S(0)) out(j) += g;
    }
  }
  return out * norm;
}

namespace detail {

template <class S>
struct FinalizeInfo {
  Index imin = 0;  // patch index (0-based, class token excluded)
  Index imax = 0;
  S scale = S(0);  // 1 / (max - min), 0 when degenerate
  bool degenerate = false;
};

// Drops the class entry, reshapes to the patch grid, min-max normalizes.
// A constant map has no contrast to normalize and comes back as all zeros.
template <class S>
ExplainabilityMap<S> finalize_map_info(const Vec<S>& raw, int grid,
                                       FinalizeInfo<S>* info) {
  const Index patches = static_cast<Index>(grid) * grid;
  if (raw.size() != patches + 1) {
    throw ArgumentError("finalize_map: raw map has " +
                        std::to_string(raw.size()) + " entries, expected " +
                        std::to_string(patches + 1));
  }
  ExplainabilityMap<S> map;
  map.raw = raw;
  map.grid.resize(grid, grid);

  Index imin = 0, imax = 0;
  S lo = raw(1), hi = raw(1);
  for (Index t = 0; t < patches; ++t) {
    const S v = raw(1 + t);
    if (v < lo) { lo = v; imin = t; }
    if (v > hi) { hi = v; imax = t; }
  }
  if (hi == lo) {
    map.grid.setZero();
    if (info) {
      info->imin = imin;
      info->imax = imax;
      info->scale = S(0);
      info->degenerate = true;
    }
    return map;
  }
  const S scale = S(1) / (hi - lo);
  for (Index t = 0; t < patches; ++t) {
    map.grid(t / grid, t % grid) = (raw(1 + t) - lo) * scale;
  }
  if (info) {
    info->imin = imin;
    info->imax = imax;
    info->scale = scale;
    info->degenerate = false;
  }
  return map;
}

}  // namespace detail

template <class S>
ExplainabilityMap<S> finalize_map(const Vec<S>& raw, int grid) {
  return detail::finalize_map_info<S>(raw, grid, nullptr);
}

// Explainability map of an embedding over the encoded image: attention
// gradient of zbar . let, rectified, averaged, min-max normalized.
template <class S>
ExplainabilityMap<S> explain(const Model<S>& model,
                             const EncoderActivations<S>& acts,
                             const Vec<S>& let) {
  AttnTensor<S> grad = tail_vjp(model, acts, let);
  return finalize_map(raw_map(grad), model.config().grid());
}

}  // namespace maskinv
