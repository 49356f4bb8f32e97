// Forward-noising schedule and the closed-form Gaussian quantities used by
// training and sampling: q(x_t | x_0), the posterior q(x_{t-1} | x_t, x_0),
// x_0 recovery from a noise prediction, the per-timestep variational term
// for learned variances, timestep respacing, and the rectified-flow
// interpolant. Timesteps are 0-based: t = 0 is the least-noised step,
// t = T-1 the most. All tables are computed and stored in double precision.

#pragma once

#include <utility>
#include <vector>

#include "ditmoe/autodiff.hpp"
#include "ditmoe/tensor.hpp"

namespace ditmoe {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // cumulative product of alphas
  std::vector<double> alpha_bars_prev;  // alpha_bar_{t-1}, with value 1 at t = 0
  std::vector<double> posterior_variances;  // beta_tilde_t; 0 at t = 0
  // log(beta_tilde) with the t = 0 entry replaced by log(beta_tilde_1),
  // since beta_tilde_0 = 0 has no finite log.
  std::vector<double> posterior_log_variance_clipped;
  std::vector<double> posterior_coef_x0;  // sqrt(abar_prev) * beta / (1 - abar)
  std::vector<double> posterior_coef_xt;  // sqrt(alpha) * (1 - abar_prev) / (1 - abar)
};

// Builds all derived tables from a beta sequence with every entry in (0,1).
NoiseSchedule schedule_from_betas(const std::vector<double>& betas);

// Linear beta ramp from beta_start to beta_end over T steps.
// Requires T >= 1 and 0 < beta_start <= beta_end < 1.
NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
std::vector<double> q_sample(const NoiseSchedule& s, const std::vector<double>& x0, int t,
                             const std::vector<double>& eps);

// Mean and variance of q(x_{t-1} | x_t, x0). At t = 0 the posterior
// collapses onto x0 (variance 0).
void posterior_mean_variance(const NoiseSchedule& s, const std::vector<double>& x0,
                             const std::vector<double>& xt, int t, std::vector<double>& mean_out,
                             double& variance_out);

// x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
std::vector<double> predict_x0_from_eps(const NoiseSchedule& s, const std::vector<double>& xt,
                                        int t, const std::vector<double>& eps);

// Maps the raw variance head v (one value per dimension) to a log variance:
// frac = clamp((v+1)/2, 0, 1), log var = frac*log(beta_t) +
// (1-frac)*log(beta_tilde_t) using the clipped posterior log variance.
// Gradient flows through v only.
Var interpolate_log_variance(const NoiseSchedule& s, const Var& v_raw, int t);

// Per-timestep variational term in nats per dimension. For t >= 1 this is
// KL(q(x_{t-1}|x_t,x0) || N(model_mean, exp(model_log_variance))); at t = 0
// it is the negative discretized Gaussian log-likelihood of x0 (8-bit bins).
// The autodiff variant takes the model mean as a plain tensor, which is the
// mean-detached convention: gradient reaches the variance head only.
Var vlb_term_var(const NoiseSchedule& s, const Tensor& model_mean, const Var& model_log_variance,
                 const Tensor& x0, const Tensor& xt, int t);
double vlb_term(const NoiseSchedule& s, const std::vector<double>& model_mean,
                const std::vector<double>& model_log_variance, const std::vector<double>& x0,
                const std::vector<double>& xt, int t);

// Evenly strided subset of the schedule's timesteps, strictly decreasing,
// always retaining the largest index T-1. num_steps in [1, T].
std::vector<int> respace(const NoiseSchedule& s, int num_steps);

// Companion schedule over the retained indices (given in the decreasing
// order produced by respace); betas are recomputed from alpha_bar ratios so
// that the respaced alpha_bar matches the original at each retained index.
NoiseSchedule respaced_schedule(const NoiseSchedule& s, const std::vector<int>& indices);

// Rectified flow interpolant: x_t = (1 - t) x0 + t eps with the velocity
// target eps - x0. t_cont must lie in [0, 1].
void rf_interpolate(const std::vector<double>& x0, const std::vector<double>& eps, double t_cont,
                    std::vector<double>& xt_out, std::vector<double>& velocity_out);

}  // namespace ditmoe
