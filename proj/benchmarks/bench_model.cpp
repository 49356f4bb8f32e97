#include <benchmark/benchmark.h>

#include "ditmoe/model.hpp"
#include "ditmoe/schedule.hpp"
#include "ditmoe/train.hpp"

namespace {

ditmoe::ModelConfig bench_config() {
  ditmoe::ModelConfig cfg;
  cfg.depth = 4;
  cfg.width = 64;
  cfg.heads = 4;
  cfg.patch = 2;
  cfg.input_size = 16;
  cfg.in_channels = 1;
  cfg.num_classes = 10;
  cfg.learned_sigma = true;
  cfg.moe.num_experts = 8;
  cfg.moe.top_k = 2;
  cfg.moe.num_shared = 2;
  return cfg;
}

void BM_ForwardInference(benchmark::State& state) {
  const ditmoe::ModelConfig cfg = bench_config();
  const ditmoe::ParamVars params = ditmoe::to_vars(ditmoe::init_parameters(cfg, 1), false);
  ditmoe::Rng rng(2);
  ditmoe::ImageCHW x(cfg.in_channels, cfg.input_size, cfg.input_size);
  for (double& v : x.v) v = rng.normal();
  ditmoe::NoGradGuard no_grad;
  for (auto _ : state) {
    ditmoe::ForwardResult r = ditmoe::forward(params, cfg, x, 500.0, 3);
    benchmark::DoNotOptimize(r.eps.val().v.data());
  }
}
BENCHMARK(BM_ForwardInference);

void BM_TrainStep(benchmark::State& state) {
  const ditmoe::ModelConfig cfg = bench_config();
  ditmoe::TrainConfig train;
  train.batch_size = 4;
  train.seed = 11;
  ditmoe::Dataset ds = ditmoe::make_procedural_dataset(cfg.num_classes, 8, cfg.input_size,
                                                       cfg.in_channels, 17);
  ditmoe::Trainer trainer(cfg, train, std::move(ds));
  for (auto _ : state) {
    ditmoe::StepStats s = trainer.step();
    benchmark::DoNotOptimize(s.loss.total);
  }
}
BENCHMARK(BM_TrainStep);

void BM_ParamCount(benchmark::State& state) {
  const ditmoe::ModelConfig cfg = ditmoe::preset("G/2-16E2A");
  for (auto _ : state) {
    ditmoe::ParamCount pc = ditmoe::param_count(cfg);
    benchmark::DoNotOptimize(pc.total);
  }
}
BENCHMARK(BM_ParamCount);

}  // namespace

BENCHMARK_MAIN();
