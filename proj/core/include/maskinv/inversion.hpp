// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "maskinv/encoder.hpp"
#include "maskinv/errors.hpp"
#include "maskinv/explain.hpp"
#include "maskinv/maskops.hpp"
#include "maskinv/model.hpp"
#include "maskinv/types.hpp"

namespace maskinv {

enum class GradPath { vanilla, decomposed };

struct InversionConfig {
  int steps = 10;
  double alpha = 0.0;          // weight of the anchor regularizer
  double epsilon = 1e-6;       // dice smoothing term
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  GradPath grad_path = GradPath::vanilla;
  bool record_trace = true;

  void validate() const {
    if (steps < 0) throw ArgumentError("inversion config: steps must be >= 0");
    if (!(epsilon > 0.0)) {
      throw ArgumentError("inversion config: epsilon must be positive");
    }
    if (!(learning_rate > 0.0)) {
      throw ArgumentError("inversion config: learning_rate must be positive");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ArgumentError("inversion config: betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) {
      throw ArgumentError("inversion config: adam_eps must be positive");
    }
    if (alpha < 0.0 || weight_decay < 0.0) {
      throw ArgumentError(
          "inversion config: alpha and weight_decay must be non-negative");
    }
  }
};

// 1 - 2*sum(map .* mask) / (sum(map) + sum(mask) + eps)
template <class S>
S dice_loss(const Mat<S>& map, const Mat<S>& mask, S eps) {
  if (map.rows() != mask.rows() || map.cols() != mask.cols()) {
    throw ArgumentError("dice_loss: map and mask shapes differ");
  }
  const S inter = (map.array() * mask.array()).sum();
  const S uni = map.sum() + mask.sum() + eps;
  if (!(uni > S(0))) {
    throw ArgumentError("dice_loss: empty map and mask with zero epsilon");
  }
  return S(1) - S(2) * inter / uni;
}

// 1 - cos(let, anchor); keeps the optimized embedding near its start.
template <class S>
S reg_loss(const Vec<S>& let, const Vec<S>& anchor) {
  return S(1) - score_cos(let, anchor);
}

template <class S>
S total_loss(S dice, S reg, S alpha) {
  return dice + alpha * reg;
}

// Attention gradient via the precomputed Jacobian: contraction over the
// joint dimension, equal to tail_vjp(let) up to floating-point reassociation.
template <class S>
AttnTensor<S> grad_attn_decomposed(const TailJacobian<S>& jac,
                                   const Vec<S>& let) {
  if (let.size() != jac.dim) {
    throw ArgumentError("grad_attn_decomposed: embedding has size " +
                        std::to_string(let.size()) + ", expected " +
                        std::to_string(jac.dim));
  }
  AttnTensor<S> g(jac.heads, jac.n);
  Eigen::Map<Vec<S>>(g.data.data(), g.data.size()).noalias() =
      jac.values * let;
  return g;
}

namespace detail {

template <class S>
Vec<S> flat(const AttnTensor<S>& t) {
  return Eigen::Map<const Vec<S>>(t.data.data(), t.data.size());
}

// Map forward plus the dice backward pass down to the attention gradient.
// Min and max locations are held fixed, the rectifier gate comes from the
// forward sign, and the class-token column receives no gradient.
template <class S>
struct MapLoss {
  ExplainabilityMap<S> map;
  S dice = S(0);
  bool degenerate = false;
  AttnTensor<S> dgrad;  // d(dice)/dG, zero when degenerate
};

template <class S>
MapLoss<S> map_loss_backward(const AttnTensor<S>& g, const Mat<S>& mask_grid,
                             S eps, bool want_grad) {
  const Index n = g.n;
  const int grid = static_cast<int>(mask_grid.rows());
  MapLoss<S> out;
  FinalizeInfo<S> info;
  out.map = finalize_map_info<S>(raw_map(g), grid, &info);
  out.degenerate = info.degenerate;

  const S inter = (out.map.grid.array() * mask_grid.array()).sum();
  const S uni = out.map.grid.sum() + mask_grid.sum() + eps;
  out.dice = S(1) - S(2) * inter / uni;

  if (!want_grad || info.degenerate) return out;

  // d(dice)/dE
  Mat<S> de =
      (S(-2) * (mask_grid.array() * uni - inter) / (uni * uni)).matrix();

  // Backward through min-max normalization with frozen extremum locations:
  // dr_k = s*de_k, dr_max -= s*sum(de .* E), dr_min += s*(sum(de .* E) - sum(de)).
  const S s = info.scale;
  const S sum_de = de.sum();
  const S sum_de_e = (de.array() * out.map.grid.array()).sum();
  Vec<S> dr = Vec<S>::Zero(n);
  const Index patches = n - 1;
  for (Index t = 0; t < patches; ++t) {
    dr(1 + t) = s * de(t / grid, t % grid);
  }
  dr(1 + info.imax) -= s * sum_de_e;
  dr(1 + info.imin) += s * (sum_de_e - sum_de);

  // Backward through the rectified head/row average.
  out.dgrad = AttnTensor<S>(g.heads, n);
  const S norm = S(1) / static_cast<S>(g.heads * n);
  for (Index r = 0; r < g.data.rows(); ++r) {
    for (Index j = 1; j < n; ++j) {
      out.dgrad.data(r, j) = g.data(r, j) > S(0) ? norm * dr(j) : S(0);
    }
  }
  return out;
}

// Gradient of 1 - cos(let, anchor) with respect to let.
template <class S>
Vec<S> reg_gradient(const Vec<S>& let, const Vec<S>& anchor) {
  const S nl = let.norm();
  const S na = anchor.norm();
  if (nl == S(0) || na == S(0)) {
    throw ArgumentError("reg_loss: zero-norm embedding");
  }
  const Vec<S> lhat = let / nl;
  const Vec<S> ahat = anchor / na;
  const S c = lhat.dot(ahat);
  return (c * lhat - ahat) / nl;
}

}  // namespace detail

template <class S>
struct LossGradient {
  Vec<S> grad;
  S dice = S(0);
  S reg = S(0);
  S total = S(0);
  bool degenerate = false;
  ExplainabilityMap<S> map;
};

// Analytic gradient of dice + alpha * reg with respect to the embedding.
// With a Jacobian the attention gradient and its transpose contraction reuse
// the precomputed tensor; without one the cached tail is replayed in both
// directions.
template <class S>
LossGradient<S> loss_gradient(const Model<S>& model,
                              const EncoderActivations<S>& acts,
                              const TailJacobian<S>* jac, const Vec<S>& let,
                              const Mat<S>& mask_grid,
                              const InversionConfig& cfg,
                              bool want_grad = true) {
  cfg.validate();
  const S alpha = static_cast<S>(cfg.alpha);
  const S eps = static_cast<S>(cfg.epsilon);

  AttnTensor<S> g = jac ? grad_attn_decomposed(*jac, let)
                        : tail_vjp(model, acts, let);
  auto ml = detail::map_loss_backward<S>(g, mask_grid, eps, want_grad);

  LossGradient<S> out;
  out.dice = ml.dice;
  out.degenerate = ml.degenerate;
  out.map = std::move(ml.map);

  const bool reg_defined = let.norm() != S(0) && acts.cls.norm() != S(0);
  if (reg_defined) {
    out.reg = reg_loss(let, acts.cls);
  } else if (alpha != S(0)) {
    throw ArgumentError("reg_loss: zero-norm embedding");
  }
  out.total = total_loss(out.dice, out.reg, alpha);

  if (!want_grad) return out;
  if (ml.degenerate) {
    out.grad = Vec<S>::Zero(let.size());
  } else if (jac) {
    out.grad = jac->values.transpose() * detail::flat(ml.dgrad);
  } else {
    out.grad = tail_jvp(model, acts, ml.dgrad);
  }
  if (alpha != S(0)) {
    out.grad += alpha * detail::reg_gradient(let, acts.cls);
  }
  return out;
}

template <class S>
struct AdamWState {
  Vec<S> m;
  Vec<S> v;
  int step = 0;  // completed updates
};

// Decoupled weight decay AdamW with bias-corrected moments.
template <class S>
void adamw_step(AdamWState<S>& state, Vec<S>& let, const Vec<S>& grad,
                const InversionConfig& cfg) {
  if (state.m.size() == 0) {
    state.m = Vec<S>::Zero(let.size());
    state.v = Vec<S>::Zero(let.size());
  }
  if (state.m.size() != let.size() || grad.size() != let.size()) {
    throw ArgumentError("adamw_step: state, embedding and gradient sizes differ");
  }
  if (!grad.allFinite()) {
    throw ArgumentError("adamw_step: gradient contains non-finite values");
  }
  const S lr = static_cast<S>(cfg.learning_rate);
  const S b1 = static_cast<S>(cfg.beta1);
  const S b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.adam_eps);
  const S wd = static_cast<S>(cfg.weight_decay);

  state.step += 1;
  const S bc1 = S(1) - std::pow(b1, static_cast<S>(state.step));
  const S bc2 = S(1) - std::pow(b2, static_cast<S>(state.step));
  state.m = b1 * state.m + (S(1) - b1) * grad;
  state.v.array() = b2 * state.v.array() + (S(1) - b2) * grad.array().square();
  let.array() = (S(1) - lr * wd) * let.array() -
                lr * (state.m.array() / bc1) /
                    ((state.v.array() / bc2).sqrt() + eps);
}

template <class S>
struct LocalizedEmbedding {
  Vec<S> vector;
  std::vector<std::array<S, 3>> loss_trace;  // (dice, reg, total) per step
  ExplainabilityMap<S> final_map;
  bool degenerate = false;
};

template <class S>
using StepCallback = std::function<void(int, const ExplainabilityMap<S>&)>;

namespace detail {

template <class S>
Mat<S> mask_grid_for(const QueryMask& mask, const ModelConfig& cfg) {
  Eigen::MatrixXd grid = mask.grid.size() > 0
                             ? mask.grid
                             : resample_to_grid(mask, cfg.patch_size);
  if (grid.rows() != cfg.grid() || grid.cols() != cfg.grid()) {
    throw ArgumentError("mask grid is " + std::to_string(grid.rows()) + "x" +
                        std::to_string(grid.cols()) + " but the model expects " +
                        std::to_string(cfg.grid()) + "x" +
                        std::to_string(cfg.grid()));
  }
  if (grid.sum() <= 0.0) {
    throw ArgumentError("query mask has no foreground on the token grid");
  }
  return grid.cast<S>();
}

template <class F>
void parallel_for(Index count, int threads, F&& fn) {
  threads = static_cast<int>(
      std::min<Index>(std::max(threads, 1), count));
  if (threads <= 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const Index i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

// Test-time optimization of a region embedding: starting from the class
// token, a fixed number of AdamW steps pulls the explainability map toward
// the query mask. The forward pass runs steps+1 times so the trace covers
// step 0 and the final state; the gradient is computed per intermediate step.
template <class S>
LocalizedEmbedding<S> mask_inversion(
    const Model<S>& model, const EncoderActivations<S>& acts,
    const QueryMask& mask, const InversionConfig& cfg,
    const std::type_identity_t<StepCallback<S>>& on_step = {}) {
  cfg.validate();
  detail::require_same_model(model, acts);
  const Mat<S> grid = detail::mask_grid_for<S>(mask, model.config());

  TailJacobian<S> jac;
  const bool decomposed = cfg.grad_path == GradPath::decomposed;
  if (decomposed) jac = tail_jacobian(model, acts);
  const TailJacobian<S>* jac_ptr = decomposed ? &jac : nullptr;

  LocalizedEmbedding<S> result;
  result.vector = acts.cls;
  AdamWState<S> state;
  if (cfg.record_trace) {
    result.loss_trace.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  }

  for (int k = 0; k <= cfg.steps; ++k) {
    const bool update = k < cfg.steps;
    auto lg = loss_gradient(model, acts, jac_ptr, result.vector, grid, cfg,
                            update);
    result.degenerate = result.degenerate || lg.degenerate;
    if (cfg.record_trace) {
      result.loss_trace.push_back({lg.dice, lg.reg, lg.total});
    }
    if (on_step) on_step(k, lg.map);
    if (!update) {
      result.final_map = std::move(lg.map);
      break;
    }
    adamw_step(state, result.vector, lg.grad, cfg);
  }
  return result;
}

namespace detail {

// Lockstep batch for the decomposed path: the Jacobian is contracted against
// every mask's embedding at once, one column per mask.
template <class S>
std::vector<LocalizedEmbedding<S>> batch_decomposed(
    const Model<S>& model, const EncoderActivations<S>& acts,
    const std::vector<Mat<S>>& grids, const InversionConfig& cfg) {
  const Index count = static_cast<Index>(grids.size());
  const Index dim = model.config().joint_dim;
  const TailJacobian<S> jac = tail_jacobian(model, acts);

  ColMat<S> lets(dim, count);
  for (Index i = 0; i < count; ++i) lets.col(i) = acts.cls;
  ColMat<S> mom = ColMat<S>::Zero(dim, count);
  ColMat<S> vel = ColMat<S>::Zero(dim, count);

  std::vector<LocalizedEmbedding<S>> results(static_cast<std::size_t>(count));
  for (auto& r : results) {
    if (cfg.record_trace) {
      r.loss_trace.reserve(static_cast<std::size_t>(cfg.steps) + 1);
    }
  }

  const S alpha = static_cast<S>(cfg.alpha);
  const S eps = static_cast<S>(cfg.epsilon);
  const Index entries = jac.values.rows();
  ColMat<S> gall(entries, count);
  ColMat<S> dgall(entries, count);

  for (int k = 0; k <= cfg.steps; ++k) {
    const bool update = k < cfg.steps;
    gall.noalias() = jac.values * lets;
    if (update) dgall.setZero();

    for (Index i = 0; i < count; ++i) {
      AttnTensor<S> g(jac.heads, jac.n);
      g.data = Eigen::Map<const Mat<S>>(gall.col(i).data(), jac.heads * jac.n,
                                        jac.n);
      auto ml = map_loss_backward<S>(g, grids[static_cast<std::size_t>(i)], eps,
                                     update);
      auto& r = results[static_cast<std::size_t>(i)];
      r.degenerate = r.degenerate || ml.degenerate;

      const Vec<S> let = lets.col(i);
      S reg = S(0);
      const bool reg_defined = let.norm() != S(0) && acts.cls.norm() != S(0);
      if (reg_defined) {
        reg = reg_loss<S>(let, acts.cls);
      } else if (alpha != S(0)) {
        throw ArgumentError("reg_loss: zero-norm embedding");
      }
      if (cfg.record_trace) {
        r.loss_trace.push_back({ml.dice, reg, total_loss(ml.dice, reg, alpha)});
      }
      if (update && !ml.degenerate) {
        dgall.col(i) = flat(ml.dgrad);
      }
      if (!update) r.final_map = std::move(ml.map);
    }

    if (!update) break;
    ColMat<S> dlets(dim, count);
    dlets.noalias() = jac.values.transpose() * dgall;
    if (alpha != S(0)) {
      for (Index i = 0; i < count; ++i) {
        dlets.col(i) += alpha * reg_gradient<S>(Vec<S>(lets.col(i)), acts.cls);
      }
    }

    const S lr = static_cast<S>(cfg.learning_rate);
    const S b1 = static_cast<S>(cfg.beta1);
    const S b2 = static_cast<S>(cfg.beta2);
    const S aeps = static_cast<S>(cfg.adam_eps);
    const S wd = static_cast<S>(cfg.weight_decay);
    const S bc1 = S(1) - std::pow(b1, static_cast<S>(k + 1));
    const S bc2 = S(1) - std::pow(b2, static_cast<S>(k + 1));
    mom = b1 * mom + (S(1) - b1) * dlets;
    vel.array() = b2 * vel.array() + (S(1) - b2) * dlets.array().square();
    lets.array() = (S(1) - lr * wd) * lets.array() -
                   lr * (mom.array() / bc1) /
                       ((vel.array() / bc2).sqrt() + aeps);
  }

  for (Index i = 0; i < count; ++i) {
    results[static_cast<std::size_t>(i)].vector = lets.col(i);
  }
  return results;
}

}  // namespace detail

// Inverts every mask against one encoded image. Per-mask results do not
// depend on batch order or thread count; the decomposed path shares a single
// Jacobian across all masks and steps.
template <class S>
std::vector<LocalizedEmbedding<S>> mask_inversion_batch(
    const Model<S>& model, const ImageTensor<S>& image,
    const std::vector<QueryMask>& masks, const InversionConfig& cfg,
    int threads = 1) {
  cfg.validate();
  EncoderActivations<S> acts = encode(model, image);

  std::vector<Mat<S>> grids;
  grids.reserve(masks.size());
  for (const auto& m : masks) {
    grids.push_back(detail::mask_grid_for<S>(m, model.config()));
  }

  if (cfg.grad_path == GradPath::decomposed) {
    return detail::batch_decomposed(model, acts, grids, cfg);
  }

  std::vector<LocalizedEmbedding<S>> results(masks.size());
  detail::parallel_for(
      static_cast<Index>(masks.size()), threads, [&](Index i) {
        results[static_cast<std::size_t>(i)] = mask_inversion(
            model, acts, masks[static_cast<std::size_t>(i)], cfg);
      });
  return results;
}

}  // namespace maskinv
