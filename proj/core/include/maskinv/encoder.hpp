// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "maskinv/errors.hpp"
#include "maskinv/model.hpp"
#include "maskinv/types.hpp"

namespace maskinv {

namespace detail {

template <class S>
struct LnStats {
  Mat<S> xhat;       // normalized rows (x - mean) / sigma
  Vec<S> inv_sigma;  // 1 / sqrt(var + eps) per row
};

// y = gamma .* (x - mean) / sqrt(var + eps) + beta, applied per row.
template <class S>
Mat<S> layernorm_rows(const Mat<S>& x, const Vec<S>& gamma, const Vec<S>& beta,
                      S eps, LnStats<S>* stats = nullptr) {
  const Index n = x.rows();
  const Index w = x.cols();
  Mat<S> out(n, w);
  if (stats) {
    stats->xhat.resize(n, w);
    stats->inv_sigma.resize(n);
  }
  for (Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().sum() / static_cast<S>(w);
    const S inv = S(1) / std::sqrt(var + eps);
    auto xhat = ((x.row(r).array() - mu) * inv).eval();
    out.row(r) =
        (xhat * gamma.transpose().array() + beta.transpose().array()).matrix();
    if (stats) {
      stats->xhat.row(r) = xhat.matrix();
      stats->inv_sigma(r) = inv;
    }
  }
  return out;
}

// Reverse-mode layernorm: maps a cotangent on y back to x.
// dx = inv_sigma * (g - mean(g) - xhat * mean(g .* xhat)) with g = dy .* gamma.
template <class S>
Mat<S> layernorm_vjp(const Mat<S>& dy, const Vec<S>& gamma,
                     const LnStats<S>& st) {
  Mat<S> dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    auto g = (dy.row(r).array() * gamma.transpose().array()).eval();
    auto xhat = st.xhat.row(r).array();
    const S mg = g.mean();
    const S mgx = (g * xhat).mean();
    dx.row(r) = (st.inv_sigma(r) * (g - mg - xhat * mgx)).matrix();
  }
  return dx;
}

// Forward-mode layernorm: maps a tangent on x to y. Same centered projection
// as the reverse mode with gamma applied after instead of before.
template <class S>
Mat<S> layernorm_jvp(const Mat<S>& dx, const Vec<S>& gamma,
                     const LnStats<S>& st) {
  Mat<S> dy(dx.rows(), dx.cols());
  for (Index r = 0; r < dx.rows(); ++r) {
    auto a = dx.row(r).array();
    auto xhat = st.xhat.row(r).array();
    const S ma = a.mean();
    const S max_ = (a * xhat).mean();
    dy.row(r) =
        ((st.inv_sigma(r) * (a - ma - xhat * max_)) * gamma.transpose().array())
            .matrix();
  }
  return dy;
}

template <class S>
S gelu(S x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  return S(0.5) * x * (S(1) + std::erf(x * S(inv_sqrt2)));
}

template <class S>
S gelu_grad(S x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  return S(0.5) * (S(1) + std::erf(x * S(inv_sqrt2))) +
         x * S(inv_sqrt2pi) * std::exp(S(-0.5) * x * x);
}

template <class S>
void softmax_rows_inplace(Eigen::Ref<Mat<S>> m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    auto e = (m.row(r).array() - mx).exp().eval();
    m.row(r) = (e / e.sum()).matrix();
  }
}

}  // namespace detail

// Cached intermediates of the last transformer block, enough to replay its
// remainder in either differentiation mode without touching earlier layers.
template <class S>
struct TailCache {
  Mat<S> block_input;  // tokens entering the last block, n x width
  Mat<S> values;       // V of the last block, n x width, head-major columns
  detail::LnStats<S> ln2;
  Mat<S> mlp_pre;  // pre-activation of the last block's MLP, n x mlp_width
  detail::LnStats<S> lnf;
};

template <class S>
struct EncoderActivations {
  std::vector<AttnTensor<S>> attn;  // per layer, softmax maps, heads x n x n
  Mat<S> tokens;                    // projected tokens, n x joint_dim
  Vec<S> cls;                       // tokens row 0
  Vec<S> zbar;                      // column mean of tokens
  TailCache<S> cache;
  std::uint64_t model_uid = 0;
};

// d(zbar . v)/dA for the last layer's attention maps, stored flat with row
// (h*n + i)*n + j and one column per joint dimension.
template <class S>
struct TailJacobian {
  Index heads = 0;
  Index n = 0;
  Index dim = 0;
  Mat<S> values;  // (heads*n*n) x dim

  S at(Index h, Index i, Index j, Index k) const {
    return values((h * n + i) * n + j, k);
  }
};

// Deterministic ViT forward pass. Records every layer's softmax attention
// maps and caches the last block's intermediates for gradient replay.
template <class S>
EncoderActivations<S> encode(const Model<S>& model, const ImageTensor<S>& image) {
  const ModelConfig& cfg = model.config();
  const WeightSet<S>& w = model.weights();
  if (image.side != cfg.image_size) {
    throw ArgumentError("encode: image side " + std::to_string(image.side) +
                        " does not match configured input size " +
                        std::to_string(cfg.image_size));
  }

  const Index n = cfg.tokens();
  const Index width = cfg.width;
  const Index heads = cfg.heads;
  const Index dh = cfg.head_dim();
  const int g = cfg.grid();
  const int p = cfg.patch_size;
  const S eps = static_cast<S>(cfg.layernorm_eps);

  // Patchify: each token row is the channel-major flattened p x p patch.
  Mat<S> patches(n - 1, cfg.patch_dim());
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const Index t = gy * g + gx;
      for (int c = 0; c < 3; ++c) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            patches(t, (c * p + py) * p + px) =
                image.at(c, gy * p + py, gx * p + px);
          }
        }
      }
    }
  }

  Mat<S> x(n, width);
  x.row(0) = w.cls.transpose();
  x.bottomRows(n - 1) = patches * w.patch_w.transpose();
  x.bottomRows(n - 1).rowwise() += w.patch_b.transpose();
  x += w.pos;

  EncoderActivations<S> acts;
  acts.attn.reserve(static_cast<std::size_t>(cfg.layers));
  acts.model_uid = model.uid();

  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& b = w.blocks[static_cast<std::size_t>(l)];
    const bool last = l == cfg.layers - 1;
    if (last) acts.cache.block_input = x;

    Mat<S> y = detail::layernorm_rows(x, b.ln1_w, b.ln1_b, eps);
    Mat<S> qkv = y * b.qkv_w.transpose();
    qkv.rowwise() += b.qkv_b.transpose();
    auto q = qkv.leftCols(width);
    auto k = qkv.middleCols(width, width);
    auto v = qkv.rightCols(width);

    AttnTensor<S> attn(heads, n);
    Mat<S> h_out(n, width);
    for (Index h = 0; h < heads; ++h) {
      Mat<S> logits =
          q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
      detail::softmax_rows_inplace<S>(logits);
      attn.head(h) = logits;
      h_out.middleCols(h * dh, dh) = logits * v.middleCols(h * dh, dh);
    }
    if (last) acts.cache.values = v;
    acts.attn.push_back(std::move(attn));

    Mat<S> o = h_out * b.out_w.transpose();
    o.rowwise() += b.out_b.transpose();
    x += o;

    Mat<S> m = detail::layernorm_rows(x, b.ln2_w, b.ln2_b, eps,
                                      last ? &acts.cache.ln2 : nullptr);
    Mat<S> pre = m * b.fc1_w.transpose();
    pre.rowwise() += b.fc1_b.transpose();
    if (last) acts.cache.mlp_pre = pre;
    Mat<S> act = pre.unaryExpr([](S t) { return detail::gelu(t); });
    Mat<S> mlp = act * b.fc2_w.transpose();
    mlp.rowwise() += b.fc2_b.transpose();
    x += mlp;
  }

  Mat<S> t = detail::layernorm_rows(x, w.lnf_w, w.lnf_b, eps, &acts.cache.lnf);
  acts.tokens = t * w.proj;
  acts.cls = acts.tokens.row(0).transpose();
  acts.zbar = acts.tokens.colwise().mean().transpose();
  return acts;
}

namespace detail {

template <class S>
void require_same_model(const Model<S>& model,
                        const EncoderActivations<S>& acts) {
  if (acts.model_uid != model.uid()) {
    throw UsageError(
        "activation cache does not belong to this model; re-run encode");
  }
}

// Shared backward tail: cotangent on the last block's output tokens mapped to
// a cotangent on its attention-residual input.
template <class S>
Mat<S> tail_backward_through_mlp(const Model<S>& model,
                                 const EncoderActivations<S>& acts,
                                 const Mat<S>& dz) {
  const auto& b = model.weights().blocks.back();
  Mat<S> dact = dz * b.fc2_w;
  Mat<S> dpre = dact.cwiseProduct(
      acts.cache.mlp_pre.unaryExpr([](S t) { return gelu_grad(t); }));
  Mat<S> dm = dpre * b.fc1_w;
  return dz + layernorm_vjp(dm, b.ln2_w, acts.cache.ln2);
}

// Shared forward tail: tangent on the attention-residual input pushed through
// the last block's MLP to its output tokens.
template <class S>
Mat<S> tail_forward_through_mlp(const Model<S>& model,
                                const EncoderActivations<S>& acts,
                                const Mat<S>& dx) {
  const auto& b = model.weights().blocks.back();
  Mat<S> dm = layernorm_jvp(dx, b.ln2_w, acts.cache.ln2);
  Mat<S> dpre = dm * b.fc1_w.transpose();
  Mat<S> dact = dpre.cwiseProduct(
      acts.cache.mlp_pre.unaryExpr([](S t) { return gelu_grad(t); }));
  return dx + dact * b.fc2_w.transpose();
}

}  // namespace detail

// Gradient of zbar . v with respect to the last layer's attention maps,
// computed by replaying the cached tail of the network. Linear in v.
template <class S>
AttnTensor<S> tail_vjp(const Model<S>& model, const EncoderActivations<S>& acts,
                       const Vec<S>& v) {
  detail::require_same_model(model, acts);
  const ModelConfig& cfg = model.config();
  const WeightSet<S>& w = model.weights();
  if (v.size() != cfg.joint_dim) {
    throw ArgumentError("tail_vjp: cotangent has size " +
                        std::to_string(v.size()) + ", expected joint_dim " +
                        std::to_string(cfg.joint_dim));
  }
  if (!v.allFinite()) {
    throw ArgumentError("tail_vjp: cotangent contains non-finite values");
  }

  const Index n = cfg.tokens();
  const Index heads = cfg.heads;
  const Index dh = cfg.head_dim();

  // s = zbar . v = (1/n) sum_p tokens_p . v, so every projected-token row
  // carries the same cotangent proj*v / n.
  Vec<S> u = (w.proj * v) / static_cast<S>(n);
  Mat<S> dt = u.transpose().replicate(n, 1);
  Mat<S> dz = detail::layernorm_vjp(dt, w.lnf_w, acts.cache.lnf);
  Mat<S> dx = detail::tail_backward_through_mlp(model, acts, dz);
  Mat<S> dhm = dx * w.blocks.back().out_w;  // cotangent on concatenated heads

  AttnTensor<S> grad(heads, n);
  for (Index h = 0; h < heads; ++h) {
    grad.head(h) = dhm.middleCols(h * dh, dh) *
                   acts.cache.values.middleCols(h * dh, dh).transpose();
  }
  return grad;
}

// Transpose of the linear map behind tail_vjp: pushes a perturbation of the
// last layer's attention maps forward to the perturbation of zbar.
template <class S>
Vec<S> tail_jvp(const Model<S>& model, const EncoderActivations<S>& acts,
                const AttnTensor<S>& da) {
  detail::require_same_model(model, acts);
  const ModelConfig& cfg = model.config();
  const WeightSet<S>& w = model.weights();
  const Index n = cfg.tokens();
  const Index heads = cfg.heads;
  const Index dh = cfg.head_dim();
  if (da.heads != heads || da.n != n) {
    throw ArgumentError("tail_jvp: attention tangent has the wrong shape");
  }

  Mat<S> dhm(n, cfg.width);
  for (Index h = 0; h < heads; ++h) {
    dhm.middleCols(h * dh, dh) =
        da.head(h) * acts.cache.values.middleCols(h * dh, dh);
  }
  Mat<S> dx = dhm * w.blocks.back().out_w.transpose();
  Mat<S> dz = detail::tail_forward_through_mlp(model, acts, dx);
  Mat<S> dt = detail::layernorm_jvp(dz, w.lnf_w, acts.cache.lnf);
  Mat<S> dp = dt * w.proj;
  return dp.colwise().mean().transpose();
}

// Full Jacobian d(zbar)/dA of the last layer, built from one basis VJP per
// joint dimension. Intended to be computed once per image and reused across
// masks and optimization steps.
template <class S>
TailJacobian<S> tail_jacobian(const Model<S>& model,
                              const EncoderActivations<S>& acts) {
  detail::require_same_model(model, acts);
  const ModelConfig& cfg = model.config();
  TailJacobian<S> jac;
  jac.heads = cfg.heads;
  jac.n = cfg.tokens();
  jac.dim = cfg.joint_dim;
  jac.values.resize(jac.heads * jac.n * jac.n, jac.dim);
  Vec<S> basis = Vec<S>::Zero(cfg.joint_dim);
  for (Index k = 0; k < cfg.joint_dim; ++k) {
    basis(k) = S(1);
    AttnTensor<S> g = tail_vjp(model, acts, basis);
    jac.values.col(k) =
        Eigen::Map<const Vec<S>>(g.data.data(), g.data.size());
    basis(k) = S(0);
  }
  return jac;
}

}  // namespace maskinv
