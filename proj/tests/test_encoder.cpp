// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "maskinv/encoder.hpp"
#include "maskinv/harness.hpp"
#include "maskinv/model.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace maskinv;

namespace {

Vec<double> flat(const Mat<double>& m) {
  return Eigen::Map<const Vec<double>>(m.data(), m.size());
}

Mat<double> unflat(const Vec<double>& v, Index rows, Index cols) {
  return Eigen::Map<const Mat<double>>(v.data(), rows, cols);
}

Mat<double> random_rows(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Mat<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

TEST_CASE("layernorm matches the reference transcription") {
  const Mat<double> x = random_rows(5, 8, 11);
  const Vec<double> gamma =
      (testutil::random_vec<double>(8, 12).array() + 1.5).matrix();
  const Vec<double> beta = testutil::random_vec<double>(8, 13);
  const double eps = 1e-5;

  const Mat<double> got = detail::layernorm_rows(x, gamma, beta, eps);
  const Mat<double> want = oracle::detail::layernorm_ref(x, gamma, beta, eps);
  CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("layernorm reverse mode agrees with finite differences") {
  const Index rows = 4, cols = 8;
  const Mat<double> x = random_rows(rows, cols, 21);
  const Vec<double> gamma =
      (testutil::random_vec<double>(cols, 22).array() + 1.0).matrix();
  const Vec<double> beta = testutil::random_vec<double>(cols, 23);
  const Mat<double> cot = random_rows(rows, cols, 24);
  const double eps = 1e-5;

  detail::LnStats<double> st;
  detail::layernorm_rows(x, gamma, beta, eps, &st);
  const Mat<double> dx = detail::layernorm_vjp(cot, gamma, st);

  const auto f = [&](const Eigen::VectorXd& probe) {
    const Mat<double> y = detail::layernorm_rows(
        unflat(probe, rows, cols), gamma, beta, eps);
    return y.cwiseProduct(cot).sum();
  };
  const Eigen::VectorXd fd = oracle::fd_gradient(f, flat(x), 1e-5);
  CHECK(oracle::rel_error(flat(dx), fd) <= 1e-7);
}

TEST_CASE("layernorm forward and reverse modes are adjoint") {
  const Index rows = 6, cols = 10;
  const Mat<double> x = random_rows(rows, cols, 31);
  const Vec<double> gamma =
      (testutil::random_vec<double>(cols, 32).array() + 1.0).matrix();
  const Vec<double> beta = testutil::random_vec<double>(cols, 33);

  detail::LnStats<double> st;
  detail::layernorm_rows(x, gamma, beta, 1e-5, &st);

  const Mat<double> dy = random_rows(rows, cols, 34);
  const Mat<double> dx = random_rows(rows, cols, 35);
  const double lhs = detail::layernorm_vjp(dy, gamma, st).cwiseProduct(dx).sum();
  const double rhs = detail::layernorm_jvp(dx, gamma, st).cwiseProduct(dy).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("gelu value and derivative") {
  CHECK(detail::gelu(0.0) == 0.0);
  CHECK(detail::gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(detail::gelu(-1.0) ==
        doctest::Approx(-0.15865525393145705).epsilon(1e-12));

  for (const double x : {-3.0, -0.7, -0.1, 0.0, 0.4, 1.3, 2.5}) {
    const double h = 1e-5;
    const double fd = (detail::gelu(x + h) - detail::gelu(x - h)) / (2.0 * h);
    CHECK(detail::gelu_grad(x) == doctest::Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("softmax rows normalize and shift-invariant") {
  Mat<double> m = random_rows(5, 7, 41);
  Mat<double> shifted = m;
  shifted.array() += 123.0;
  detail::softmax_rows_inplace<double>(m);
  detail::softmax_rows_inplace<double>(shifted);

  for (Index r = 0; r < m.rows(); ++r) {
    CHECK(m.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.row(r).minCoeff() > 0.0);
  }
  CHECK((m - shifted).cwiseAbs().maxCoeff() <= 1e-12);

  Mat<double> constant = Mat<double>::Constant(1, 4, 3.25);
  detail::softmax_rows_inplace<double>(constant);
  CHECK((constant.array() - 0.25).abs().maxCoeff() <= 1e-15);
}

TEST_CASE("encode produces coherent activations") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 51);
  const auto image = testutil::random_image<double>(cfg, 52);
  const auto acts = encode(model, image);

  CHECK(acts.attn.size() == 2);
  for (const auto& layer : acts.attn) {
    CHECK(layer.heads == cfg.heads);
    CHECK(layer.n == cfg.tokens());
    for (Index r = 0; r < layer.data.rows(); ++r) {
      CHECK(layer.data.row(r).sum() == doctest::Approx(1.0).epsilon(1e-10));
    }
    CHECK(layer.data.minCoeff() > 0.0);
  }

  CHECK(acts.tokens.rows() == cfg.tokens());
  CHECK(acts.tokens.cols() == cfg.joint_dim);
  CHECK((acts.cls - acts.tokens.row(0).transpose()).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK((acts.zbar - acts.tokens.colwise().mean().transpose())
            .cwiseAbs()
            .maxCoeff() <= 1e-15);
  CHECK(acts.model_uid == model.uid());

  const auto again = encode(model, image);
  CHECK(again.tokens == acts.tokens);

  ImageTensor<double> wrong(cfg.image_size + cfg.patch_size);
  CHECK_THROWS_AS(encode(model, wrong), ArgumentError);
}

TEST_CASE("reference tail score reproduces the forward pass") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 61);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 62));
  const Vec<double> v = testutil::random_vec<double>(cfg.joint_dim, 63);

  const double replayed = oracle::tail_score(model, acts, acts.attn.back(), v);
  CHECK(std::abs(replayed - acts.zbar.dot(v)) <= 1e-10);
}

TEST_CASE("tail reverse mode checks out against finite differences") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 71);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 72));
  const Vec<double> v = testutil::random_vec<double>(cfg.joint_dim, 73);

  const AttnTensor<double> grad = tail_vjp(model, acts, v);
  REQUIRE(grad.heads == cfg.heads);
  REQUIRE(grad.n == cfg.tokens());

  AttnTensor<double> probe = acts.attn.back();
  Vec<double> fd(grad.entries());
  const double h = 1e-4;
  Index idx = 0;
  for (Index hh = 0; hh < grad.heads; ++hh) {
    for (Index i = 0; i < grad.n; ++i) {
      for (Index j = 0; j < grad.n; ++j, ++idx) {
        const double saved = probe.at(hh, i, j);
        probe.at(hh, i, j) = saved + h;
        const double up = oracle::tail_score(model, acts, probe, v);
        probe.at(hh, i, j) = saved - h;
        const double down = oracle::tail_score(model, acts, probe, v);
        probe.at(hh, i, j) = saved;
        fd(idx) = (up - down) / (2.0 * h);
      }
    }
  }
  CHECK(oracle::rel_error(flat(grad.data), fd) <= 1e-5);
}

TEST_CASE("tail reverse mode is linear and validates input") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 81);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 82));

  const Vec<double> zero = Vec<double>::Zero(cfg.joint_dim);
  CHECK(tail_vjp(model, acts, zero).data.cwiseAbs().maxCoeff() == 0.0);

  const Vec<double> v1 = testutil::random_vec<double>(cfg.joint_dim, 83);
  const Vec<double> v2 = testutil::random_vec<double>(cfg.joint_dim, 84);
  const Mat<double> combined =
      tail_vjp(model, acts, (1.5 * v1 - 0.25 * v2).eval()).data;
  const Mat<double> parts = 1.5 * tail_vjp(model, acts, v1).data -
                            0.25 * tail_vjp(model, acts, v2).data;
  CHECK((combined - parts).cwiseAbs().maxCoeff() <= 1e-12);

  const Vec<double> wide = Vec<double>::Ones(cfg.joint_dim + 1);
  CHECK_THROWS_AS(tail_vjp(model, acts, wide), ArgumentError);
  Vec<double> bad = v1;
  bad(0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(tail_vjp(model, acts, bad), ArgumentError);
}

TEST_CASE("tail forward mode is the transpose of the reverse mode") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 91);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 92));
  const Vec<double> v = testutil::random_vec<double>(cfg.joint_dim, 93);

  AttnTensor<double> da(cfg.heads, cfg.tokens());
  da.data = random_rows(da.data.rows(), da.data.cols(), 94);

  const AttnTensor<double> grad = tail_vjp(model, acts, v);
  const Vec<double> pushed = tail_jvp(model, acts, da);
  const double lhs = grad.data.cwiseProduct(da.data).sum();
  const double rhs = v.dot(pushed);
  CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));

  // Directional finite difference of the replayed score.
  const double h = 1e-5;
  AttnTensor<double> up = acts.attn.back();
  AttnTensor<double> down = acts.attn.back();
  up.data += h * da.data;
  down.data -= h * da.data;
  const double fd = (oracle::tail_score(model, acts, up, v) -
                     oracle::tail_score(model, acts, down, v)) /
                    (2.0 * h);
  CHECK(rhs == doctest::Approx(fd).epsilon(1e-6));

  AttnTensor<double> wrong(cfg.heads, cfg.tokens() + 1);
  CHECK_THROWS_AS(tail_jvp(model, acts, wrong), ArgumentError);
}

TEST_CASE("tail jacobian columns and contractions") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 101);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 102));

  const TailJacobian<double> jac = tail_jacobian(model, acts);
  CHECK(jac.heads == cfg.heads);
  CHECK(jac.n == cfg.tokens());
  CHECK(jac.dim == cfg.joint_dim);
  CHECK(jac.values.rows() == cfg.heads * cfg.tokens() * cfg.tokens());
  CHECK(jac.values.cols() == cfg.joint_dim);

  // Column k is exactly the reverse-mode result for the k-th basis vector.
  Vec<double> basis = Vec<double>::Zero(cfg.joint_dim);
  basis(3) = 1.0;
  const AttnTensor<double> col = tail_vjp(model, acts, basis);
  CHECK((jac.values.col(3) - flat(col.data)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(jac.at(1, 4, 2, 3) == col.at(1, 4, 2));

  // Contracting with a cotangent reproduces tail_vjp, contracting with an
  // attention tangent reproduces tail_jvp.
  const Vec<double> v = testutil::random_vec<double>(cfg.joint_dim, 103);
  const Vec<double> via_jac = jac.values * v;
  CHECK(oracle::rel_error(via_jac, flat(tail_vjp(model, acts, v).data)) <=
        1e-6);

  AttnTensor<double> da(cfg.heads, cfg.tokens());
  da.data = random_rows(da.data.rows(), da.data.cols(), 104);
  const Vec<double> via_jac_t = jac.values.transpose() * flat(da.data);
  CHECK(oracle::rel_error(via_jac_t, tail_jvp(model, acts, da)) <= 1e-6);
}
