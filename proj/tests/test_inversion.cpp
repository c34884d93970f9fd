// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "maskinv/harness.hpp"
#include "maskinv/inversion.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace maskinv;

namespace {

QueryMask grid_mask(const Mat<double>& grid) {
  QueryMask mask;
  mask.grid = grid;
  return mask;
}

double rel_diff(const Vec<double>& a, const Vec<double>& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-30});
}

}  // namespace

TEST_CASE("dice loss worked examples") {
  Mat<double> m(4, 4);
  m.setZero();
  m.middleRows(1, 2).setOnes();  // 8 foreground cells
  REQUIRE(m.sum() == 8.0);

  const double eps = 1e-6;
  const double self = dice_loss<double>(m, m, eps);
  CHECK(self >= 0.0);
  CHECK(self <= 1e-7);
  // The algebraic bound eps / (2*sum + eps); the 1 - x evaluation can land
  // one unit in the last place above it.
  CHECK(self <= eps / (2.0 * 8.0 + eps) + 1e-15);

  const Mat<double> zero = Mat<double>::Zero(4, 4);
  CHECK(dice_loss<double>(zero, m, eps) == 1.0);

  Mat<double> half = Mat<double>::Constant(2, 2, 0.5);
  Mat<double> corner = Mat<double>::Zero(2, 2);
  corner(0, 0) = 1.0;
  CHECK(dice_loss<double>(half, corner, 1e-12) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("dice loss symmetry and bounds") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    Mat<double> a(3, 3), b(3, 3);
    for (Index i = 0; i < a.size(); ++i) {
      a.data()[i] = dist(rng);
      b.data()[i] = dist(rng);
    }
    const double ab = dice_loss<double>(a, b, 1e-6);
    CHECK(ab == dice_loss<double>(b, a, 1e-6));
    CHECK(ab <= 1.0);
  }
  CHECK_THROWS_AS(dice_loss<double>(Mat<double>::Zero(2, 2),
                                    Mat<double>::Zero(3, 3), 1e-6),
                  ArgumentError);
}

TEST_CASE("anchor regularizer worked examples") {
  const Vec<double> cls = testutil::random_vec<double>(8, 5);
  CHECK(reg_loss<double>(cls, cls) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(reg_loss<double>((-cls).eval(), cls) ==
        doctest::Approx(2.0).epsilon(1e-14));

  Vec<double> a = Vec<double>::Zero(4), b = Vec<double>::Zero(4);
  a(0) = 2.0;
  b(2) = -3.0;
  CHECK(reg_loss<double>(a, b) == 1.0);

  CHECK_THROWS_AS(reg_loss<double>(Vec<double>::Zero(4).eval(), cls),
                  ArgumentError);
}

TEST_CASE("total loss composition") {
  CHECK(total_loss(0.4, 0.1, 5.0) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(total_loss(0.37, 123.0, 0.0) == 0.37);
  CHECK(total_loss(0.37, 0.0, 7.0) == 0.37);
}

TEST_CASE("jacobian contraction reproduces the attention gradient") {
  SUBCASE("zero embedding and basis contraction") {
    TailJacobian<double> jac;
    jac.heads = 1;
    jac.n = 3;
    jac.dim = 2;
    jac.values = Mat<double>::Zero(9, 2);
    jac.values((0 * 3 + 1) * 3 + 2, 1) = 2.5;

    const AttnTensor<double> zero =
        grad_attn_decomposed(jac, Vec<double>::Zero(2).eval());
    CHECK(zero.data.cwiseAbs().maxCoeff() == 0.0);

    Vec<double> e1 = Vec<double>::Zero(2);
    e1(1) = 1.0;
    const AttnTensor<double> g = grad_attn_decomposed(jac, e1);
    CHECK(g.at(0, 1, 2) == 2.5);
    CHECK(g.data.cwiseAbs().sum() == 2.5);

    CHECK_THROWS_AS(grad_attn_decomposed(jac, Vec<double>::Zero(3).eval()),
                    ArgumentError);
  }

  SUBCASE("random toy model matches the replayed gradient") {
    const ModelConfig cfg = testutil::toy_config();
    const Model<double> model = random_model<double>(cfg, 301);
    const auto acts = encode(model, testutil::random_image<double>(cfg, 302));
    const auto jac = tail_jacobian(model, acts);
    const Vec<double> let = testutil::random_vec<double>(cfg.joint_dim, 303);

    const AttnTensor<double> a = grad_attn_decomposed(jac, let);
    const AttnTensor<double> b = tail_vjp(model, acts, let);
    CHECK((a.data - b.data).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("loss gradient matches finite differences") {
  const ModelConfig cfg = testutil::toy_config();
  // Seeds picked so no probe step crosses a rectifier gate or moves the
  // frozen extremum; at such kinks the difference quotient stops being a
  // derivative estimate.
  for (const double alpha : {0.0, 5.0}) {
    for (int trial = 0; trial < 3; ++trial) {
      const std::uint64_t seed = 500 + 10 * trial + (alpha > 0.0 ? 1 : 0);
      const Model<double> model = random_model<double>(cfg, seed);
      const auto acts =
          encode(model, testutil::random_image<double>(cfg, seed + 1));
      const Mat<double> mask =
          testutil::random_mask_grid<double>(cfg.grid(), seed + 2);
      Vec<double> let = testutil::random_vec<double>(cfg.joint_dim, seed + 3);
      let += acts.cls;  // keep the norm away from zero for the regularizer

      InversionConfig icfg;
      icfg.alpha = alpha;
      const TailJacobian<double>* nojac = nullptr;

      const auto lg = loss_gradient(model, acts, nojac, let, mask, icfg);
      REQUIRE_FALSE(lg.degenerate);

      const auto f = [&](const Eigen::VectorXd& probe) {
        return static_cast<double>(
            loss_gradient(model, acts, nojac, Vec<double>(probe), mask, icfg,
                          false)
                .total);
      };
      const Eigen::VectorXd fd = oracle::fd_gradient(f, let, 1e-4);
      CHECK(oracle::rel_error(lg.grad, fd) <= 1e-4);

      // The decomposed path computes the same gradient through the Jacobian.
      const auto jac = tail_jacobian(model, acts);
      const auto lg2 = loss_gradient(model, acts, &jac, let, mask, icfg);
      CHECK(rel_diff(lg.grad, lg2.grad) <= 1e-8);
      CHECK(lg.total == doctest::Approx(lg2.total).epsilon(1e-10));
    }
  }
}

TEST_CASE("loss gradient vanishes when the map already equals the mask") {
  // A Jacobian with a single active column makes the explainability map an
  // exact indicator: the positive entries of G all sit in attention column
  // j*, so after rectification, averaging and min-max normalization the map
  // is 1 at the matching patch and 0 elsewhere. With the mask equal to that
  // indicator the Dice gradient cancels at the frozen maximum and every
  // other attention column is gated off, so the embedding gradient is zero.
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 420);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 421));

  const Index n = cfg.tokens();
  const Index target_patch = 6;
  const Index target_col = 1 + target_patch;

  AttnTensor<double> g(cfg.heads, n);
  g.at(0, 3, target_col) = 34.0;
  g.at(1, 11, target_col) = 17.0;

  TailJacobian<double> jac;
  jac.heads = cfg.heads;
  jac.n = n;
  jac.dim = cfg.joint_dim;
  jac.values = Mat<double>::Zero(cfg.heads * n * n, cfg.joint_dim);
  jac.values.col(5) = Eigen::Map<const Vec<double>>(g.data.data(), g.data.size());

  Vec<double> let = Vec<double>::Zero(cfg.joint_dim);
  let(5) = 1.0;

  Mat<double> mask = Mat<double>::Zero(cfg.grid(), cfg.grid());
  mask(target_patch / cfg.grid(), target_patch % cfg.grid()) = 1.0;

  InversionConfig icfg;
  icfg.alpha = 0.0;

  const auto lg = loss_gradient(model, acts, &jac, let, mask, icfg);
  REQUIRE_FALSE(lg.degenerate);
  CHECK((lg.map.grid - mask).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(lg.dice <= 1e-6);
  CHECK(lg.grad.norm() < 1e-6);
}

TEST_CASE("adamw update rule") {
  InversionConfig cfg;

  SUBCASE("null gradient leaves the embedding untouched") {
    Vec<double> let = testutil::random_vec<double>(6, 7);
    const Vec<double> before = let;
    AdamWState<double> state;
    adamw_step(state, let, Vec<double>::Zero(6).eval(), cfg);
    CHECK(let == before);
    CHECK(state.step == 1);
  }

  SUBCASE("first step moves by the sign of the gradient") {
    Vec<double> let = Vec<double>::Zero(3);
    Vec<double> grad(3);
    grad << 2.0, -0.5, 0.0;
    AdamWState<double> state;
    adamw_step(state, let, grad, cfg);
    for (Index i = 0; i < 3; ++i) {
      const double g = grad(i);
      const double want =
          g == 0.0 ? 0.0
                   : -cfg.learning_rate * g / (std::abs(g) + cfg.adam_eps);
      CHECK(let(i) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  SUBCASE("decoupled weight decay scales the embedding") {
    cfg.weight_decay = 0.1;
    Vec<double> let = testutil::random_vec<double>(5, 8);
    const Vec<double> before = let;
    AdamWState<double> state;
    adamw_step(state, let, Vec<double>::Zero(5).eval(), cfg);
    CHECK((let - 0.99 * before).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SUBCASE("two unit-gradient steps walk about two learning rates") {
    Vec<double> let = Vec<double>::Constant(1, 3.0);
    const Vec<double> grad = Vec<double>::Ones(1);
    AdamWState<double> state;
    adamw_step(state, let, grad, cfg);
    CHECK(let(0) == doctest::Approx(2.9).epsilon(1e-6));
    adamw_step(state, let, grad, cfg);
    CHECK(let(0) == doctest::Approx(2.8).epsilon(1e-6));
    CHECK(state.step == 2);
  }

  SUBCASE("input validation") {
    Vec<double> let = Vec<double>::Zero(4);
    AdamWState<double> state;
    CHECK_THROWS_AS(adamw_step(state, let, Vec<double>::Zero(3).eval(), cfg),
                    ArgumentError);
    Vec<double> bad = Vec<double>::Zero(4);
    bad(2) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(adamw_step(state, let, bad, cfg), ArgumentError);
  }
}

TEST_CASE("inversion config validation") {
  InversionConfig cfg;
  cfg.steps = -1;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.beta2 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("mask inversion basics") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 501);
  const auto acts = encode(model, testutil::random_image<double>(cfg, 502));
  const QueryMask mask =
      grid_mask(testutil::random_mask_grid<double>(cfg.grid(), 503));

  SUBCASE("zero steps returns the class token") {
    InversionConfig icfg;
    icfg.steps = 0;
    const auto out = mask_inversion(model, acts, mask, icfg);
    CHECK(out.vector == acts.cls);
    CHECK(out.loss_trace.size() == 1);
    const auto ref = explain(model, acts, acts.cls);
    CHECK(out.final_map.grid == ref.grid);
  }

  SUBCASE("deterministic and traced") {
    InversionConfig icfg;
    icfg.steps = 10;
    const auto a = mask_inversion(model, acts, mask, icfg);
    const auto b = mask_inversion(model, acts, mask, icfg);
    CHECK(a.vector == b.vector);
    CHECK(a.loss_trace.size() == 11);
    for (const auto& row : a.loss_trace) {
      CHECK(row[2] == doctest::Approx(row[0] + icfg.alpha * row[1])
                          .epsilon(1e-12));
    }
    // The final map is the map of the final vector.
    const auto ref = explain(model, acts, a.vector);
    CHECK(a.final_map.grid == ref.grid);
  }

  SUBCASE("per-step callback sees every state") {
    InversionConfig icfg;
    icfg.steps = 10;
    std::vector<int> seen;
    Mat<double> first;
    const auto out = mask_inversion<double>(
        model, acts, mask, icfg, [&](int k, const ExplainabilityMap<double>& m) {
          if (seen.empty()) first = m.grid;
          seen.push_back(k);
        });
    CHECK(seen.size() == 11);
    for (int k = 0; k <= 10; ++k) CHECK(seen[static_cast<std::size_t>(k)] == k);
    CHECK(first == explain(model, acts, acts.cls).grid);
    CHECK(out.loss_trace.size() == 11);
  }

  SUBCASE("trace can be disabled") {
    InversionConfig icfg;
    icfg.steps = 3;
    icfg.record_trace = false;
    const auto out = mask_inversion(model, acts, mask, icfg);
    CHECK(out.loss_trace.empty());
    CHECK(out.vector.size() == cfg.joint_dim);
  }

  SUBCASE("empty mask is rejected") {
    const QueryMask empty =
        grid_mask(Mat<double>::Zero(cfg.grid(), cfg.grid()));
    InversionConfig icfg;
    CHECK_THROWS_AS(mask_inversion(model, acts, empty, icfg), ArgumentError);
  }

  SUBCASE("activations must come from the same model") {
    const Model<double> other = random_model<double>(cfg, 501);
    InversionConfig icfg;
    CHECK_THROWS_AS(mask_inversion(other, acts, mask, icfg), UsageError);
  }
}

TEST_CASE("batched inversion matches the per-mask loop") {
  const ModelConfig cfg = testutil::toy_config();
  const Model<double> model = random_model<double>(cfg, 601);
  const auto image = testutil::random_image<double>(cfg, 602);
  const auto acts = encode(model, image);

  std::vector<QueryMask> masks;
  for (std::uint64_t s = 0; s < 3; ++s) {
    masks.push_back(grid_mask(testutil::random_mask_grid<double>(cfg.grid(),
                                                                 610 + s)));
  }

  InversionConfig vanilla;
  vanilla.steps = 10;
  vanilla.alpha = 5.0;
  InversionConfig decomposed = vanilla;
  decomposed.grad_path = GradPath::decomposed;

  const auto via_vanilla = mask_inversion_batch(model, image, masks, vanilla);
  const auto via_jac = mask_inversion_batch(model, image, masks, decomposed);
  REQUIRE(via_vanilla.size() == 3);
  REQUIRE(via_jac.size() == 3);

  for (std::size_t i = 0; i < masks.size(); ++i) {
    // Batch equals the standalone loop.
    const auto single = mask_inversion(model, acts, masks[i], vanilla);
    CHECK(via_vanilla[i].vector == single.vector);
    // Both gradient paths land on the same embedding.
    CHECK(rel_diff(via_vanilla[i].vector, via_jac[i].vector) <= 1e-6);
    CHECK(via_vanilla[i].loss_trace.size() == 11);
    CHECK(via_jac[i].loss_trace.size() == 11);
  }

  SUBCASE("permutation and thread count do not change results") {
    std::vector<QueryMask> shuffled = {masks[2], masks[0], masks[1]};
    const auto out = mask_inversion_batch(model, image, shuffled, vanilla);
    CHECK(out[0].vector == via_vanilla[2].vector);
    CHECK(out[1].vector == via_vanilla[0].vector);
    CHECK(out[2].vector == via_vanilla[1].vector);

    const auto threaded =
        mask_inversion_batch(model, image, masks, vanilla, 4);
    for (std::size_t i = 0; i < masks.size(); ++i) {
      CHECK(threaded[i].vector == via_vanilla[i].vector);
    }

    const auto jac_shuffled =
        mask_inversion_batch(model, image, shuffled, decomposed);
    CHECK(rel_diff(jac_shuffled[0].vector, via_jac[2].vector) <= 1e-12);
    CHECK(rel_diff(jac_shuffled[1].vector, via_jac[0].vector) <= 1e-12);
  }

  SUBCASE("decomposed final maps match the embedding") {
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const auto ref = explain(model, acts, via_jac[i].vector);
      CHECK((via_jac[i].final_map.grid - ref.grid).cwiseAbs().maxCoeff() <=
            1e-9);
    }
  }
}
