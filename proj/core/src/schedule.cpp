#include "ditmoe/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ditmoe {

namespace {

void check_t(const NoiseSchedule& s, int t, const char* who) {
  if (t < 0 || t >= s.T)
    throw std::out_of_range(std::string(who) + ": timestep " + std::to_string(t) +
                            " outside [0, " + std::to_string(s.T) + ")");
}

void check_same_size(size_t a, size_t b, const char* who) {
  if (a != b) throw std::invalid_argument(std::string(who) + ": array size mismatch");
}

}  // namespace

NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw std::invalid_argument("schedule_from_betas: empty beta sequence");
  for (double b : betas)
    if (!(b > 0.0 && b < 1.0))
      throw std::invalid_argument("schedule_from_betas: betas must lie in (0, 1)");

  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.betas = betas;
  s.alphas.resize(s.T);
  s.alpha_bars.resize(s.T);
  s.alpha_bars_prev.resize(s.T);
  s.posterior_variances.resize(s.T);
  s.posterior_log_variance_clipped.resize(s.T);
  s.posterior_coef_x0.resize(s.T);
  s.posterior_coef_xt.resize(s.T);

  double abar = 1.0;
  for (int t = 0; t < s.T; ++t) {
    s.alphas[t] = 1.0 - betas[t];
    s.alpha_bars_prev[t] = abar;
    abar *= s.alphas[t];
    s.alpha_bars[t] = abar;
  }
  for (int t = 0; t < s.T; ++t) {
    const double abar_t = s.alpha_bars[t];
    const double abar_prev = s.alpha_bars_prev[t];
    s.posterior_variances[t] = s.betas[t] * (1.0 - abar_prev) / (1.0 - abar_t);
    s.posterior_coef_x0[t] = std::sqrt(abar_prev) * s.betas[t] / (1.0 - abar_t);
    s.posterior_coef_xt[t] = std::sqrt(s.alphas[t]) * (1.0 - abar_prev) / (1.0 - abar_t);
  }
  // beta_tilde_0 is exactly 0; fall back to the t = 1 value for its log
  // (single-step schedules fall back to beta_0).
  const double fallback = s.T > 1 ? s.posterior_variances[1] : s.betas[0];
  for (int t = 0; t < s.T; ++t) {
    const double var = t == 0 ? fallback : s.posterior_variances[t];
    s.posterior_log_variance_clipped[t] = std::log(var);
  }
  return s;
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("build_linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
    throw std::invalid_argument("build_linear_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(T);
  for (int t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
    betas[t] = beta_start + frac * (beta_end - beta_start);
  }
  return schedule_from_betas(betas);
}

std::vector<double> q_sample(const NoiseSchedule& s, const std::vector<double>& x0, int t,
                             const std::vector<double>& eps) {
  check_t(s, t, "q_sample");
  check_same_size(x0.size(), eps.size(), "q_sample");
  const double a = std::sqrt(s.alpha_bars[t]);
  const double b = std::sqrt(1.0 - s.alpha_bars[t]);
  std::vector<double> out(x0.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

void posterior_mean_variance(const NoiseSchedule& s, const std::vector<double>& x0,
                             const std::vector<double>& xt, int t, std::vector<double>& mean_out,
                             double& variance_out) {
  check_t(s, t, "posterior_mean_variance");
  check_same_size(x0.size(), xt.size(), "posterior_mean_variance");
  const double c0 = s.posterior_coef_x0[t];
  const double c1 = s.posterior_coef_xt[t];
  mean_out.resize(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) mean_out[i] = c0 * x0[i] + c1 * xt[i];
  variance_out = s.posterior_variances[t];
}

std::vector<double> predict_x0_from_eps(const NoiseSchedule& s, const std::vector<double>& xt,
                                        int t, const std::vector<double>& eps) {
  check_t(s, t, "predict_x0_from_eps");
  check_same_size(xt.size(), eps.size(), "predict_x0_from_eps");
  const double inv_a = 1.0 / std::sqrt(s.alpha_bars[t]);
  const double b = std::sqrt(1.0 - s.alpha_bars[t]);
  std::vector<double> out(xt.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = inv_a * (xt[i] - b * eps[i]);
  return out;
}

Var interpolate_log_variance(const NoiseSchedule& s, const Var& v_raw, int t) {
  check_t(s, t, "interpolate_log_variance");
  const double log_beta = std::log(s.betas[t]);
  const double log_tilde = s.posterior_log_variance_clipped[t];
  Var frac = vclamp(scale(add_scalar(v_raw, 1.0), 0.5), 0.0, 1.0);
  return add_scalar(scale(frac, log_beta - log_tilde), log_tilde);
}

namespace {

// 0.5 * (1 + erf(x / sqrt(2))) on the tape, for the discretized decoder.
Var std_normal_cdf(const Var& x) { return scale(add_scalar(verf(scale(x, M_SQRT1_2)), 1.0), 0.5); }

}  // namespace

Var vlb_term_var(const NoiseSchedule& s, const Tensor& model_mean, const Var& model_log_variance,
                 const Tensor& x0, const Tensor& xt, int t) {
  check_t(s, t, "vlb_term");
  const Tensor& lv = model_log_variance.val();
  if (!model_mean.same_shape(lv) || !x0.same_shape(lv) || !xt.same_shape(lv))
    throw std::invalid_argument("vlb_term: shape mismatch");

  Var mean_c = Var::constant(model_mean);
  if (t == 0) {
    // -log p(x0 | x1) under a Gaussian discretized into 256 bins of width
    // 2/255 on [-1, 1]; outermost bins absorb the tails.
    Var inv_sigma = vexp(scale(model_log_variance, -0.5));
    Var centered = sub(Var::constant(x0), mean_c);
    Var upper = mul(add_scalar(centered, 1.0 / 255.0), inv_sigma);
    Var lower = mul(add_scalar(centered, -1.0 / 255.0), inv_sigma);
    Var cdf_hi = std_normal_cdf(upper);
    Var cdf_lo = std_normal_cdf(lower);
    // Select per element: x0 <= -1+1/255 -> cdf_hi; x0 >= 1-1/255 -> 1-cdf_lo;
    // else cdf_hi - cdf_lo. Masks are constants.
    const size_t n = x0.size();
    Tensor lo_mask(x0.rows, x0.cols), hi_mask(x0.rows, x0.cols), mid_mask(x0.rows, x0.cols);
    for (size_t i = 0; i < n; ++i) {
      if (x0.v[i] <= -1.0 + 1.0 / 255.0) lo_mask.v[i] = 1.0;
      else if (x0.v[i] >= 1.0 - 1.0 / 255.0) hi_mask.v[i] = 1.0;
      else mid_mask.v[i] = 1.0;
    }
    Var prob = add(add(mul(cdf_hi, Var::constant(lo_mask)),
                       mul(sub(Var::constant(Tensor::full(x0.rows, x0.cols, 1.0)), cdf_lo),
                           Var::constant(hi_mask))),
                   mul(sub(cdf_hi, cdf_lo), Var::constant(mid_mask)));
    Var log_prob = vlog(vclamp(prob, 1e-12, 2.0));
    return neg(mean_all(log_prob));
  }

  std::vector<double> q_mean;
  double q_var = 0.0;
  std::vector<double> x0v(x0.v.begin(), x0.v.end());
  std::vector<double> xtv(xt.v.begin(), xt.v.end());
  posterior_mean_variance(s, x0v, xtv, t, q_mean, q_var);
  const double q_logvar = std::log(q_var);

  // KL(q || p) = 0.5 (log var_p - log var_q) + (var_q + (mu_q - mu_p)^2) /
  // (2 var_p) - 0.5, elementwise, averaged over dimensions.
  Tensor qm(x0.rows, x0.cols);
  qm.v.assign(q_mean.begin(), q_mean.end());
  Var delta2 = square(sub(Var::constant(qm), mean_c));
  Var inv_var_p = vexp(neg(model_log_variance));
  Var kl = add_scalar(
      add(scale(add_scalar(model_log_variance, -q_logvar), 0.5),
          scale(mul(add_scalar(delta2, q_var), inv_var_p), 0.5)),
      -0.5);
  return mean_all(kl);
}

double vlb_term(const NoiseSchedule& s, const std::vector<double>& model_mean,
                const std::vector<double>& model_log_variance, const std::vector<double>& x0,
                const std::vector<double>& xt, int t) {
  const int n = static_cast<int>(x0.size());
  Tensor mm(1, n), lv(1, n), x0t(1, n), xtt(1, n);
  mm.v.assign(model_mean.begin(), model_mean.end());
  lv.v.assign(model_log_variance.begin(), model_log_variance.end());
  x0t.v.assign(x0.begin(), x0.end());
  xtt.v.assign(xt.begin(), xt.end());
  NoGradGuard ng;
  return vlb_term_var(s, mm, Var::constant(lv), x0t, xtt, t).scalar();
}

std::vector<int> respace(const NoiseSchedule& s, int num_steps) {
  if (num_steps < 1 || num_steps > s.T)
    throw std::invalid_argument("respace: num_steps must lie in [1, T]");
  const double stride = static_cast<double>(s.T) / num_steps;
  std::vector<int> idx(num_steps);
  for (int m = 0; m < num_steps; ++m) {
    int i = s.T - 1 - static_cast<int>(std::floor(m * stride + 0.5));
    if (i < 0) i = 0;
    idx[m] = i;
  }
  for (int m = 1; m < num_steps; ++m)
    if (idx[m] >= idx[m - 1]) throw std::logic_error("respace: indices not strictly decreasing");
  return idx;
}

NoiseSchedule respaced_schedule(const NoiseSchedule& s, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("respaced_schedule: empty index list");
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= s.T)
      throw std::out_of_range("respaced_schedule: index out of range");
    if (i > 0 && indices[i] >= indices[i - 1])
      throw std::invalid_argument("respaced_schedule: indices must be strictly decreasing");
  }
  // Ascending order for beta recomputation from alpha_bar ratios.
  std::vector<double> betas(indices.size());
  double prev_abar = 1.0;
  for (size_t k = 0; k < indices.size(); ++k) {
    const int orig = indices[indices.size() - 1 - k];
    const double abar = s.alpha_bars[orig];
    betas[k] = 1.0 - abar / prev_abar;
    prev_abar = abar;
  }
  return schedule_from_betas(betas);
}

void rf_interpolate(const std::vector<double>& x0, const std::vector<double>& eps, double t_cont,
                    std::vector<double>& xt_out, std::vector<double>& velocity_out) {
  if (!(t_cont >= 0.0 && t_cont <= 1.0))
    throw std::invalid_argument("rf_interpolate: t_cont must lie in [0, 1]");
  check_same_size(x0.size(), eps.size(), "rf_interpolate");
  xt_out.resize(x0.size());
  velocity_out.resize(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) {
    xt_out[i] = (1.0 - t_cont) * x0[i] + t_cont * eps[i];
    velocity_out[i] = eps[i] - x0[i];
  }
}

}  // namespace ditmoe
