#include "ditmoe/sample.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "ditmoe/io.hpp"

namespace ditmoe {

void SampleRequest::validate(const ModelConfig& model, const NoiseSchedule& sched) const {
  if (class_label < 0 || class_label > model.num_classes)
    throw std::invalid_argument("sample: class label out of range");
  if (num_steps < 1 || num_steps > sched.T)
    throw std::invalid_argument("sample: num_steps must be in [1, T]");
  if (!(cfg_scale >= 0.0)) throw std::invalid_argument("sample: cfg_scale must be >= 0");
}

ImageCHW denoise_step(const DenoiseContext& ctx, const ImageCHW& x_t, int step_pos,
                      const SampleRequest& request, Rng& rng, RoutingTrace* trace) {
  const ModelConfig& model = *ctx.model;
  const std::vector<int>& indices = *ctx.indices;
  const int num_steps = static_cast<int>(indices.size());
  if (step_pos < 0 || step_pos >= num_steps)
    throw std::invalid_argument("denoise_step: step position out of range");
  const int t_model = indices[step_pos];            // timestep value fed to the network
  const int t_coarse = num_steps - 1 - step_pos;    // index into the respaced schedule
  const bool final_step = step_pos == num_steps - 1;

  NoGradGuard no_grad;
  TraceContext tctx;
  const TraceContext* tptr = nullptr;
  if (trace) {
    tctx.trace = trace;
    tctx.step_ordinal = step_pos;
    tctx.timestep = t_model;
    tctx.class_label = request.class_label;
    tptr = &tctx;
  }
  ForwardResult fr = cfg_forward(*ctx.params, model, x_t, static_cast<double>(t_model),
                                 request.class_label, request.cfg_scale, tptr);
  const ImageCHW eps_hat = fr.eps_image(model);

  std::vector<double> x0_hat = predict_x0_from_eps(*ctx.respaced, x_t.v, t_coarse, eps_hat.v);
  for (double& v : x0_hat) v = std::min(1.0, std::max(-1.0, v));

  std::vector<double> mean;
  double variance;
  posterior_mean_variance(*ctx.respaced, x0_hat, x_t.v, t_coarse, mean, variance);

  ImageCHW next(x_t.c, x_t.h, x_t.w);
  if (model.learned_sigma) {
    Var logvar_tok = interpolate_log_variance(*ctx.respaced, fr.sigma_raw, t_coarse);
    ImageCHW logvar =
        unpatchify(logvar_tok.val(), model.in_channels, model.input_size, model.input_size,
                   model.patch);
    for (size_t i = 0; i < next.v.size(); ++i) {
      const double z = final_step ? 0.0 : rng.normal();
      next.v[i] = mean[i] + std::exp(0.5 * logvar.v[i]) * z;
    }
  } else {
    const double sigma = std::sqrt(variance);
    for (size_t i = 0; i < next.v.size(); ++i) {
      const double z = final_step ? 0.0 : rng.normal();
      next.v[i] = mean[i] + sigma * z;
    }
  }
  for (double v : next.v)
    if (!std::isfinite(v))
      throw std::runtime_error("sampler diverged: non-finite state at timestep " +
                               std::to_string(t_model));
  return next;
}

SampleResult ddpm_sample(const ParamVars& params, const ModelConfig& model,
                         const NoiseSchedule& sched, const SampleRequest& request) {
  model.validate();
  request.validate(model, sched);

  SampleResult res;
  res.timesteps = respace(sched, request.num_steps);
  const NoiseSchedule rsched = respaced_schedule(sched, res.timesteps);
  res.trace.top_k = model.moe.top_k;

  DenoiseContext ctx;
  ctx.params = &params;
  ctx.model = &model;
  ctx.base = &sched;
  ctx.respaced = &rsched;
  ctx.indices = &res.timesteps;

  Rng rng(request.seed);
  ImageCHW x(model.in_channels, model.input_size, model.input_size);
  for (double& v : x.v) v = rng.normal();

  RoutingTrace* trace = request.trace ? &res.trace : nullptr;
  for (int m = 0; m < request.num_steps; ++m) x = denoise_step(ctx, x, m, request, rng, trace);
  res.image = std::move(x);
  return res;
}

void write_sample_artifacts(const std::string& prefix, const SampleResult& result,
                            const SampleRequest& request) {
  const PnmImage pnm = to_pnm(result.image);
  write_pnm(prefix + (pnm.channels == 3 ? ".ppm" : ".pgm"), pnm);
  std::ofstream meta(prefix + ".txt");
  if (!meta) throw std::runtime_error("cannot create metadata file: " + prefix + ".txt");
  meta << "seed = " << request.seed << '\n'
       << "class = " << request.class_label << '\n'
       << "steps = " << request.num_steps << '\n'
       << "cfg_scale = " << request.cfg_scale << '\n';
  if (!meta) throw std::runtime_error("failed writing metadata file: " + prefix + ".txt");
}

}  // namespace ditmoe
