#include <benchmark/benchmark.h>

#include "vmddpm/autograd.hpp"
#include "vmddpm/cross_scan.hpp"
#include "vmddpm/network.hpp"
#include "vmddpm/ssm_core.hpp"

using namespace vmddpm;

namespace {

ssm::DiscreteSsmParams invariant_params(std::size_t ch, std::size_t n, Rng& rng) {
  ssm::ContinuousSsmParams p;
  p.A = uniform_tensor({ch, n}, -3.0, -0.05, rng);
  p.B = normal_tensor({1, n}, rng);
  p.C = normal_tensor({1, n}, rng);
  p.D = normal_tensor({ch}, rng);
  return ssm::discretize(p, uniform_tensor({1, ch}, 0.01, 1.0, rng));
}

void BM_SelectiveScan(benchmark::State& state) {
  Rng rng(1);
  const std::size_t L = state.range(0);
  const auto d = invariant_params(16, 8, rng);
  const Tensor u = normal_tensor({L, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ssm::selective_scan(u, d));
  state.SetItemsProcessed(state.iterations() * L);
}
BENCHMARK(BM_SelectiveScan)->RangeMultiplier(4)->Range(64, 16384);

void BM_KernelConv(benchmark::State& state) {
  Rng rng(2);
  const std::size_t L = state.range(0);
  const auto d = invariant_params(16, 8, rng);
  const Tensor u = normal_tensor({L, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ssm::ssm_conv_apply(u, ssm::ssm_kernel(d, L), d.D));
  state.SetItemsProcessed(state.iterations() * L);
}
BENCHMARK(BM_KernelConv)->RangeMultiplier(4)->Range(64, 1024);

/// Forward and backward of the fused scan used inside the network.
void BM_FusedScanGrad(benchmark::State& state) {
  Rng rng(3);
  const std::size_t L = state.range(0), ch = 16, n = 4;
  const Tensor u = normal_tensor({L, ch}, rng);
  const Tensor delta = uniform_tensor({L, ch}, 0.01, 1.0, rng);
  const Tensor A = uniform_tensor({ch, n}, -3.0, -0.05, rng);
  const Tensor B = normal_tensor({L, n}, rng), C = normal_tensor({L, n}, rng), D = normal_tensor({ch}, rng);
  for (auto _ : state) {
    ag::Tape tape;
    auto y = ssm::selective_scan_zoh(tape.variable(u), tape.variable(delta), tape.variable(A), tape.variable(B),
                                     tape.variable(C), tape.variable(D));
    tape.backward(ag::sum(y));
  }
  state.SetItemsProcessed(state.iterations() * L);
}
BENCHMARK(BM_FusedScanGrad)->RangeMultiplier(4)->Range(64, 4096);

void BM_CsmForward(benchmark::State& state) {
  Rng rng(4);
  const std::size_t side = state.range(0);
  const auto w = scan::init_csm_weights(16, 32, 4, false, rng);
  const Tensor x = normal_tensor({16, side, side}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(scan::csm_forward(x, w, true, rng));
}
BENCHMARK(BM_CsmForward)->Arg(8)->Arg(16)->Arg(32);

net::ModelConfig bench_model(std::size_t res, std::size_t width) {
  net::ModelConfig c;
  c.resolution = res;
  c.base_width = width;
  c.state_dim = 4;
  c.time_embed_dim = 32;
  c.layers_per_stage = 1;
  return c;
}

void BM_UnetForward(benchmark::State& state) {
  const auto cfg = bench_model(state.range(0), state.range(1));
  Rng rng(5);
  const auto w = net::init_model_weights(cfg, rng);
  const Tensor x = normal_tensor({1, cfg.resolution, cfg.resolution}, rng);
  for (auto _ : state) {
    net::ForwardContext ctx{rng, true};
    benchmark::DoNotOptimize(net::unet_forward(x, 500, w, cfg, ctx));
  }
}
BENCHMARK(BM_UnetForward)->Args({32, 8})->Args({32, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);

void BM_UnetTrainStep(benchmark::State& state) {
  const auto cfg = bench_model(32, state.range(0));
  Rng rng(6);
  const auto w = net::init_model_weights(cfg, rng);
  const Tensor x = normal_tensor({1, 32, 32}, rng);
  const Tensor target = normal_tensor({1, 32, 32}, rng);
  for (auto _ : state) {
    ag::Tape tape;
    net::ForwardContext ctx{rng, true};
    tape.backward(ag::mse(net::unet_forward(tape.constant(x), 500, w, cfg, ctx), tape.constant(target)));
  }
}
BENCHMARK(BM_UnetTrainStep)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
