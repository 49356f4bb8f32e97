#include <benchmark/benchmark.h>

#include "ditmoe/schedule.hpp"

namespace {

void BM_BuildLinearSchedule(benchmark::State& state) {
  for (auto _ : state) {
    ditmoe::NoiseSchedule s = ditmoe::build_linear_schedule(1000, 1e-4, 2e-2);
    benchmark::DoNotOptimize(s.posterior_log_variance_clipped.data());
  }
}
BENCHMARK(BM_BuildLinearSchedule);

void BM_QSample(benchmark::State& state) {
  const ditmoe::NoiseSchedule s = ditmoe::build_linear_schedule(1000, 1e-4, 2e-2);
  const int n = static_cast<int>(state.range(0));
  ditmoe::Rng rng(7);
  std::vector<double> x0(n), eps(n);
  for (int i = 0; i < n; ++i) {
    x0[i] = rng.uniform() * 2.0 - 1.0;
    eps[i] = rng.normal();
  }
  int t = 0;
  for (auto _ : state) {
    std::vector<double> xt = ditmoe::q_sample(s, x0, t, eps);
    benchmark::DoNotOptimize(xt.data());
    t = (t + 37) % s.T;
  }
}
BENCHMARK(BM_QSample)->Arg(1024)->Arg(4096);

void BM_VlbTerm(benchmark::State& state) {
  const ditmoe::NoiseSchedule s = ditmoe::build_linear_schedule(1000, 1e-4, 2e-2);
  const int n = 1024;
  ditmoe::Rng rng(11);
  std::vector<double> x0(n), eps(n), mean(n), logvar(n);
  for (int i = 0; i < n; ++i) {
    x0[i] = rng.uniform() * 2.0 - 1.0;
    eps[i] = rng.normal();
    logvar[i] = -6.0 + rng.uniform();
  }
  const int t = 500;
  const std::vector<double> xt = ditmoe::q_sample(s, x0, t, eps);
  for (int i = 0; i < n; ++i) mean[i] = xt[i] * 0.99;
  for (auto _ : state) {
    const double v = ditmoe::vlb_term(s, mean, logvar, x0, xt, t);
    benchmark::DoNotOptimize(v);
  }
}
BENCHMARK(BM_VlbTerm);

void BM_Respace(benchmark::State& state) {
  const ditmoe::NoiseSchedule s = ditmoe::build_linear_schedule(1000, 1e-4, 2e-2);
  for (auto _ : state) {
    const std::vector<int> idx = ditmoe::respace(s, 250);
    ditmoe::NoiseSchedule r = ditmoe::respaced_schedule(s, idx);
    benchmark::DoNotOptimize(r.betas.data());
  }
}
BENCHMARK(BM_Respace);

}  // namespace

BENCHMARK_MAIN();
