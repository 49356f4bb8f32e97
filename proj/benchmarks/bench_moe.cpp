#include <benchmark/benchmark.h>

#include "ditmoe/moe.hpp"

namespace {

ditmoe::Var random_leaf(int rows, int cols, double scale, ditmoe::Rng& rng) {
  ditmoe::Tensor t(rows, cols);
  for (double& v : t.v) v = rng.normal() * scale;
  return ditmoe::Var::leaf(std::move(t), false);
}

ditmoe::MoeLayerVars make_layer(int width, const ditmoe::MoeConfig& cfg, ditmoe::Rng& rng) {
  ditmoe::MoeLayerVars layer;
  layer.router = random_leaf(width, cfg.num_experts, 0.006, rng);
  const int hr = cfg.routed_hidden(width);
  const int hs = cfg.shared_hidden(width);
  for (int e = 0; e < cfg.num_experts; ++e) {
    ditmoe::ExpertVars ev;
    ev.w1 = random_leaf(width, hr, 0.02, rng);
    ev.w2 = random_leaf(hr, width, 0.02, rng);
    ev.w3 = random_leaf(width, hr, 0.02, rng);
    layer.experts.push_back(ev);
  }
  for (int s = 0; s < cfg.num_shared; ++s) {
    ditmoe::ExpertVars ev;
    ev.w1 = random_leaf(width, hs, 0.02, rng);
    ev.w2 = random_leaf(hs, width, 0.02, rng);
    ev.w3 = random_leaf(width, hs, 0.02, rng);
    layer.shared.push_back(ev);
  }
  return layer;
}

void BM_MoeForward(benchmark::State& state) {
  const int width = static_cast<int>(state.range(0));
  const int tokens = static_cast<int>(state.range(1));
  ditmoe::MoeConfig cfg;
  cfg.num_experts = 8;
  cfg.top_k = 2;
  cfg.num_shared = 2;
  ditmoe::Rng rng(3);
  const ditmoe::MoeLayerVars layer = make_layer(width, cfg, rng);
  ditmoe::Tensor x(tokens, width);
  for (double& v : x.v) v = rng.normal();
  const ditmoe::Var xin = ditmoe::Var::constant(x);
  ditmoe::NoGradGuard no_grad;
  for (auto _ : state) {
    ditmoe::MoeForwardResult r = ditmoe::moe_forward(layer, xin, cfg);
    benchmark::DoNotOptimize(r.output.val().v.data());
  }
}
BENCHMARK(BM_MoeForward)->Args({64, 64})->Args({128, 256});

void BM_Gate(benchmark::State& state) {
  const int width = 128;
  ditmoe::Rng rng(5);
  ditmoe::Tensor router(width, 16);
  for (double& v : router.v) v = rng.normal() * 0.006;
  std::vector<double> x(width);
  for (double& v : x) v = rng.normal();
  for (auto _ : state) {
    std::vector<double> p = ditmoe::gate(router, x);
    benchmark::DoNotOptimize(p.data());
  }
}
BENCHMARK(BM_Gate);

void BM_TopKSelect(benchmark::State& state) {
  ditmoe::Rng rng(9);
  std::vector<double> probs(64);
  double sum = 0.0;
  for (double& v : probs) {
    v = rng.uniform();
    sum += v;
  }
  for (double& v : probs) v /= sum;
  for (auto _ : state) {
    ditmoe::RouterDecision d = ditmoe::top_k_select(probs, 6);
    benchmark::DoNotOptimize(d.selected.data());
  }
}
BENCHMARK(BM_TopKSelect);

}  // namespace

BENCHMARK_MAIN();
