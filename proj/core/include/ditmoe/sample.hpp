// Ancestral DDPM sampling: respaced reverse steps with classifier-free
// guidance, x0 clamping, learned-variance substitution and routing-trace
// capture for the analyzer.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditmoe/model.hpp"
#include "ditmoe/schedule.hpp"

namespace ditmoe {

struct SampleRequest {
  int class_label = 0;
  int num_steps = 250;
  double cfg_scale = 1.0;
  uint64_t seed = 0;
  bool trace = false;

  void validate(const ModelConfig& model, const NoiseSchedule& sched) const;
};

struct SampleResult {
  ImageCHW image;
  RoutingTrace trace;          // populated when requested
  std::vector<int> timesteps;  // respaced schedule indices, decreasing
};

// Everything a reverse step needs besides the evolving state. base is the
// full schedule (its indices are the timestep values the model was trained
// on); respaced is the companion schedule over the retained indices, which
// carries the coarse-step posterior.
struct DenoiseContext {
  const ParamVars* params = nullptr;
  const ModelConfig* model = nullptr;
  const NoiseSchedule* base = nullptr;
  const NoiseSchedule* respaced = nullptr;
  const std::vector<int>* indices = nullptr;  // decreasing, indices->size() == respaced->T
};

// One reverse step at position step_pos (0 = noisiest) of the respaced list.
// Predicts eps via cfg_forward, clamps the implied x0 to [-1, 1], forms the
// coarse posterior mean, substitutes the learned per-dimension variance when
// the model has a variance head, and adds sqrt(variance) * z. z = 0 on the
// final step. Appends routing events to trace when non-null.
ImageCHW denoise_step(const DenoiseContext& ctx, const ImageCHW& x_t, int step_pos,
                      const SampleRequest& request, Rng& rng, RoutingTrace* trace);

// Full reverse chain from seeded standard normal noise.
SampleResult ddpm_sample(const ParamVars& params, const ModelConfig& model,
                         const NoiseSchedule& sched, const SampleRequest& request);

// Writes prefix.pgm or prefix.ppm (by channel count) and prefix.txt with the
// request's seed, class, step count and guidance scale.
void write_sample_artifacts(const std::string& prefix, const SampleResult& result,
                            const SampleRequest& request);

}  // namespace ditmoe
