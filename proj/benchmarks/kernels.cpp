// SPDX-License-Identifier: Apache-2.0
// Microbenchmarks for the hot kernels: forward encode, the attention-gradient
// pullback, the one-off Jacobian build, its per-step contraction, and a full
// optimization step. Single precision, single thread, 197 tokens.
#include <benchmark/benchmark.h>

#include <random>

#include "maskinv/encoder.hpp"
#include "maskinv/explain.hpp"
#include "maskinv/harness.hpp"
#include "maskinv/inversion.hpp"
#include "maskinv/maskops.hpp"
#include "maskinv/model.hpp"

namespace {

using namespace maskinv;

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.layers = 6;
  cfg.heads = 4;
  cfg.width = 128;
  cfg.joint_dim = 64;
  cfg.patch_size = 16;
  cfg.image_size = 224;
  cfg.mlp_ratio = 4.0;
  cfg.preprocess.mean = {0.5, 0.5, 0.5};
  cfg.preprocess.stddev = {0.5, 0.5, 0.5};
  return cfg;
}

struct BenchState {
  Model<float> model;
  ImageTensor<float> image;
  EncoderActivations<float> acts;
  TailJacobian<float> jac;
  Vec<float> let;
  QueryMask mask;

  BenchState()
      : model(random_model<float>(bench_config(), 5)),
        image(model.config().image_size) {
    std::mt19937_64 rng(6);
    for (auto& v : image.chw) {
      v = static_cast<float>(
          2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0);
    }
    acts = encode(model, image);
    jac = tail_jacobian(model, acts);
    let = acts.cls;
    const int side = model.config().image_size;
    mask = box_to_mask(32, 32, 127, 127, side, side);
  }
};

const BenchState& shared() {
  static const BenchState state;
  return state;
}

void BM_encode(benchmark::State& bench) {
  const auto& s = shared();
  for (auto _ : bench) {
    benchmark::DoNotOptimize(encode(s.model, s.image));
  }
}
BENCHMARK(BM_encode)->Unit(benchmark::kMillisecond);

void BM_attention_pullback(benchmark::State& bench) {
  const auto& s = shared();
  for (auto _ : bench) {
    benchmark::DoNotOptimize(tail_vjp(s.model, s.acts, s.let));
  }
}
BENCHMARK(BM_attention_pullback)->Unit(benchmark::kMillisecond);

void BM_jacobian_build(benchmark::State& bench) {
  const auto& s = shared();
  for (auto _ : bench) {
    benchmark::DoNotOptimize(tail_jacobian(s.model, s.acts));
  }
}
BENCHMARK(BM_jacobian_build)->Unit(benchmark::kMillisecond);

void BM_jacobian_contract(benchmark::State& bench) {
  const auto& s = shared();
  for (auto _ : bench) {
    benchmark::DoNotOptimize(grad_attn_decomposed(s.jac, s.let));
  }
}
BENCHMARK(BM_jacobian_contract)->Unit(benchmark::kMillisecond);

void BM_explain(benchmark::State& bench) {
  const auto& s = shared();
  for (auto _ : bench) {
    benchmark::DoNotOptimize(explain(s.model, s.acts, s.let));
  }
}
BENCHMARK(BM_explain)->Unit(benchmark::kMillisecond);

// One full optimization step per iteration, through either gradient path.
void BM_inversion_step(benchmark::State& bench) {
  const auto& s = shared();
  InversionConfig cfg;
  cfg.steps = 1;
  cfg.record_trace = false;
  cfg.grad_path =
      bench.range(0) == 0 ? GradPath::vanilla : GradPath::decomposed;
  for (auto _ : bench) {
    benchmark::DoNotOptimize(
        mask_inversion(s.model, s.acts, s.mask, cfg));
  }
}
BENCHMARK(BM_inversion_step)
    ->Arg(0)
    ->Arg(1)
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
