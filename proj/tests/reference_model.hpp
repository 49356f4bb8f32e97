// Straight-line reference implementation of the transformer forward pass
// and the training objective, written with explicit loops and kept free of
// the library's math routines. The unit tests compare the production code
// against this version; any shared bug would have to be introduced twice.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ditmoe/model.hpp"
#include "ditmoe/train.hpp"

namespace refmodel {

using Mat = std::vector<std::vector<double>>;  // row-major

inline Mat zeros(int r, int c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat get_param(const ditmoe::ParamStore& P, const std::string& name) {
  auto it = P.find(name);
  if (it == P.end()) throw std::runtime_error("reference: missing parameter " + name);
  Mat m = zeros(it->second.rows, it->second.cols);
  for (int r = 0; r < it->second.rows; ++r)
    for (int c = 0; c < it->second.cols; ++c)
      m[r][c] = it->second.data[static_cast<size_t>(r) * it->second.cols + c];
  return m;
}

inline std::vector<double> vec_mat(const std::vector<double>& x, const Mat& w) {
  const int in = static_cast<int>(w.size());
  const int out = static_cast<int>(w[0].size());
  if (static_cast<int>(x.size()) != in) throw std::runtime_error("reference: vec_mat shape");
  std::vector<double> y(out, 0.0);
  for (int i = 0; i < in; ++i)
    for (int j = 0; j < out; ++j) y[j] += x[i] * w[i][j];
  return y;
}

inline Mat mat_mat(const Mat& a, const Mat& w) {
  Mat y(a.size());
  for (size_t r = 0; r < a.size(); ++r) y[r] = vec_mat(a[r], w);
  return y;
}

inline void add_row_inplace(Mat& a, const std::vector<double>& row) {
  for (auto& r : a)
    for (size_t c = 0; c < r.size(); ++c) r[c] += row[c];
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double ncdf(double z) { return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))); }

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline Mat layernorm(const Mat& a, double eps) {
  Mat y = a;
  for (auto& row : y) {
    const int n = static_cast<int>(row.size());
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (double& v : row) v = (v - mean) * inv;
  }
  return y;
}

// x * (1 + scale) + shift with per-column vectors.
inline Mat modulate(const Mat& x, const std::vector<double>& shift,
                    const std::vector<double>& scl) {
  Mat y = x;
  for (auto& row : y)
    for (size_t c = 0; c < row.size(); ++c) row[c] = row[c] * (1.0 + scl[c]) + shift[c];
  return y;
}

// Patch tokens: row-major patch grid, channel-major layout within a token.
inline Mat ref_patchify(const ditmoe::ImageCHW& img, int p) {
  const int grid_h = img.h / p, grid_w = img.w / p;
  Mat tok = zeros(grid_h * grid_w, img.c * p * p);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx)
      for (int ch = 0; ch < img.c; ++ch)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            tok[gy * grid_w + gx][ch * p * p + dy * p + dx] = img.at(ch, gy * p + dy, gx * p + dx);
  return tok;
}

// Fixed 2-D sin-cos table: first half row features, second half column
// features; each axis half is [sin block, cos block] over dim/4 frequencies.
inline Mat ref_pos(int grid_h, int grid_w, int dim) {
  const int quarter = dim / 4;
  Mat pos = zeros(grid_h * grid_w, dim);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      std::vector<double>& row = pos[r * grid_w + c];
      for (int i = 0; i < quarter; ++i) {
        const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
        row[i] = std::sin(r * omega);
        row[quarter + i] = std::cos(r * omega);
        row[2 * quarter + i] = std::sin(c * omega);
        row[3 * quarter + i] = std::cos(c * omega);
      }
    }
  return pos;
}

inline std::vector<double> ref_tfeat(double t) {
  std::vector<double> f(256);
  for (int i = 0; i < 128; ++i) {
    const double omega = std::pow(10000.0, -static_cast<double>(i) / 128.0);
    f[i] = std::sin(t * omega);
    f[128 + i] = std::cos(t * omega);
  }
  return f;
}

// Top-k by repeated max scan; strict > keeps ties on the lowest index.
inline std::vector<int> ref_topk(const std::vector<double>& probs, int k) {
  std::vector<int> sel;
  std::vector<bool> used(probs.size(), false);
  for (int j = 0; j < k; ++j) {
    int best = -1;
    for (size_t i = 0; i < probs.size(); ++i)
      if (!used[i] && (best < 0 || probs[i] > probs[best])) best = static_cast<int>(i);
    used[best] = true;
    sel.push_back(best);
  }
  return sel;
}

inline std::vector<double> ref_expert(const ditmoe::ParamStore& P, const std::string& prefix,
                                      ditmoe::ExpertForm form, const std::vector<double>& x) {
  Mat w1 = get_param(P, prefix + ".w1");
  Mat w2 = get_param(P, prefix + ".w2");
  std::vector<double> h = vec_mat(x, w1);
  for (double& v : h) v = gelu(v);
  if (form == ditmoe::ExpertForm::gated) {
    Mat w3 = get_param(P, prefix + ".w3");
    std::vector<double> g = vec_mat(x, w3);
    for (size_t i = 0; i < h.size(); ++i) h[i] *= g[i];
  }
  return vec_mat(h, w2);
}

struct RefMoeOut {
  Mat probs;                           // [tokens, experts]
  std::vector<std::vector<int>> selected;  // [tokens][k]
};

struct RefForward {
  Mat eps;    // [tokens, p^2 C]
  Mat sigma;  // [tokens, p^2 C] when learned_sigma
  std::vector<RefMoeOut> moe;  // per MoE block, model order
};

inline RefForward ref_forward(const ditmoe::ParamStore& P, const ditmoe::ModelConfig& cfg,
                              const ditmoe::ImageCHW& img, double t, int label) {
  const int D = cfg.width;
  const int grid = cfg.input_size / cfg.patch;
  const int T = grid * grid;
  const double ln_eps = 1e-6;

  Mat h = mat_mat(ref_patchify(img, cfg.patch), get_param(P, "patch_embed.weight"));
  add_row_inplace(h, get_param(P, "patch_embed.bias")[0]);
  Mat pos = ref_pos(grid, grid, D);
  for (int r = 0; r < T; ++r)
    for (int c = 0; c < D; ++c) h[r][c] += pos[r][c];

  std::vector<double> temb = vec_mat(ref_tfeat(t), get_param(P, "t_embed.fc1.weight"));
  {
    const std::vector<double> b = get_param(P, "t_embed.fc1.bias")[0];
    for (size_t i = 0; i < temb.size(); ++i) temb[i] = silu(temb[i] + b[i]);
  }
  temb = vec_mat(temb, get_param(P, "t_embed.fc2.weight"));
  {
    const std::vector<double> b = get_param(P, "t_embed.fc2.bias")[0];
    for (size_t i = 0; i < temb.size(); ++i) temb[i] += b[i];
  }
  std::vector<double> cond = get_param(P, "class_embed.table")[label];
  for (int i = 0; i < D; ++i) cond[i] += temb[i];

  std::vector<double> cond_act(D);
  for (int i = 0; i < D; ++i) cond_act[i] = silu(cond[i]);

  RefForward out;
  for (int blk = 0; blk < cfg.depth; ++blk) {
    const std::string p = "block" + std::to_string(blk);
    std::vector<double> mod = vec_mat(cond_act, get_param(P, p + ".adaln.weight"));
    {
      const std::vector<double> b = get_param(P, p + ".adaln.bias")[0];
      for (size_t i = 0; i < mod.size(); ++i) mod[i] += b[i];
    }
    auto chunk = [&](int k) {
      return std::vector<double>(mod.begin() + k * D, mod.begin() + (k + 1) * D);
    };
    const std::vector<double> shift_msa = chunk(0), scale_msa = chunk(1), gate_msa = chunk(2);
    const std::vector<double> shift_mlp = chunk(3), scale_mlp = chunk(4), gate_mlp = chunk(5);

    // Attention on the modulated layernorm.
    Mat x1 = modulate(layernorm(h, ln_eps), shift_msa, scale_msa);
    Mat qkv = mat_mat(x1, get_param(P, p + ".attn.qkv.weight"));
    add_row_inplace(qkv, get_param(P, p + ".attn.qkv.bias")[0]);
    const int hd = D / cfg.heads;
    Mat merged = zeros(T, D);
    for (int head = 0; head < cfg.heads; ++head) {
      const int qo = head * hd, ko = D + head * hd, vo = 2 * D + head * hd;
      for (int i = 0; i < T; ++i) {
        std::vector<double> scores(T, 0.0);
        for (int j = 0; j < T; ++j) {
          double dot = 0.0;
          for (int d = 0; d < hd; ++d) dot += qkv[i][qo + d] * qkv[j][ko + d];
          scores[j] = dot / std::sqrt(static_cast<double>(hd));
        }
        std::vector<double> att = softmax(scores);
        for (int j = 0; j < T; ++j)
          for (int d = 0; d < hd; ++d) merged[i][qo + d] += att[j] * qkv[j][vo + d];
      }
    }
    Mat attn_out = mat_mat(merged, get_param(P, p + ".attn.proj.weight"));
    add_row_inplace(attn_out, get_param(P, p + ".attn.proj.bias")[0]);
    for (int r = 0; r < T; ++r)
      for (int c = 0; c < D; ++c) h[r][c] += gate_msa[c] * attn_out[r][c];

    // Feed-forward on the second modulated layernorm.
    Mat x2 = modulate(layernorm(h, ln_eps), shift_mlp, scale_mlp);
    Mat ffn = zeros(T, D);
    if (cfg.is_moe_layer(blk)) {
      Mat router = get_param(P, p + ".moe.router");
      RefMoeOut mo;
      mo.probs = zeros(T, cfg.moe.num_experts);
      for (int r = 0; r < T; ++r) {
        std::vector<double> probs = softmax(vec_mat(x2[r], router));
        mo.probs[r] = probs;
        std::vector<int> sel = ref_topk(probs, cfg.moe.top_k);
        mo.selected.push_back(sel);
        for (int e : sel) {
          std::vector<double> y =
              ref_expert(P, p + ".moe.expert" + std::to_string(e), cfg.moe.form, x2[r]);
          for (int c = 0; c < D; ++c) ffn[r][c] += probs[e] * y[c];
        }
        for (int s = 0; s < cfg.moe.num_shared; ++s) {
          std::vector<double> y =
              ref_expert(P, p + ".moe.shared" + std::to_string(s), cfg.moe.form, x2[r]);
          for (int c = 0; c < D; ++c) ffn[r][c] += y[c];
        }
      }
      out.moe.push_back(std::move(mo));
    } else {
      Mat mid = mat_mat(x2, get_param(P, p + ".mlp.w1"));
      for (auto& row : mid)
        for (double& v : row) v = gelu(v);
      ffn = mat_mat(mid, get_param(P, p + ".mlp.w2"));
    }
    for (int r = 0; r < T; ++r)
      for (int c = 0; c < D; ++c) h[r][c] += gate_mlp[c] * ffn[r][c];
  }

  std::vector<double> fmod = vec_mat(cond_act, get_param(P, "final.adaln.weight"));
  {
    const std::vector<double> b = get_param(P, "final.adaln.bias")[0];
    for (size_t i = 0; i < fmod.size(); ++i) fmod[i] += b[i];
  }
  const std::vector<double> fshift(fmod.begin(), fmod.begin() + D);
  const std::vector<double> fscale(fmod.begin() + D, fmod.end());
  Mat final_in = modulate(layernorm(h, ln_eps), fshift, fscale);
  Mat full = mat_mat(final_in, get_param(P, "final.linear.weight"));
  add_row_inplace(full, get_param(P, "final.linear.bias")[0]);

  const int half = cfg.patch * cfg.patch * cfg.in_channels;
  out.eps = zeros(T, half);
  if (cfg.learned_sigma) out.sigma = zeros(T, half);
  for (int r = 0; r < T; ++r) {
    for (int c = 0; c < half; ++c) out.eps[r][c] = full[r][c];
    if (cfg.learned_sigma)
      for (int c = 0; c < half; ++c) out.sigma[r][c] = full[r][half + c];
  }
  return out;
}

// ----- training loss -----

struct RefSched {
  std::vector<double> betas, alphas, abars, abars_prev;
};

inline RefSched ref_linear_schedule(int T, double b0, double b1) {
  RefSched s;
  s.betas.resize(T);
  for (int t = 0; t < T; ++t)
    s.betas[t] = T == 1 ? b0 : b0 + (b1 - b0) * (static_cast<double>(t) / (T - 1));
  s.alphas.resize(T);
  s.abars.resize(T);
  s.abars_prev.resize(T);
  double run = 1.0;
  for (int t = 0; t < T; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    s.abars_prev[t] = run;
    run *= s.alphas[t];
    s.abars[t] = run;
  }
  return s;
}

struct RefLoss {
  double mse = 0.0, vlb = 0.0, balance = 0.0, total = 0.0;
};

inline RefLoss ref_batch_loss(const ditmoe::ParamStore& P, const ditmoe::ModelConfig& cfg,
                              const RefSched& s, const ditmoe::TrainConfig& train,
                              const std::vector<ditmoe::DrawnItem>& items) {
  const int T_sched = static_cast<int>(s.betas.size());
  RefLoss out;
  double bal_sum = 0.0;
  int bal_terms = 0;

  for (const ditmoe::DrawnItem& item : items) {
    ditmoe::ImageCHW xt(item.x0.c, item.x0.h, item.x0.w);
    Mat target;
    double t_value = 0.0;
    int t_idx = item.t_index;
    if (train.objective == ditmoe::Objective::ddpm) {
      const double a = std::sqrt(s.abars[t_idx]);
      const double b = std::sqrt(1.0 - s.abars[t_idx]);
      for (size_t i = 0; i < xt.v.size(); ++i) xt.v[i] = a * item.x0.v[i] + b * item.eps.v[i];
      target = ref_patchify(item.eps, cfg.patch);
      t_value = t_idx;
    } else {
      ditmoe::ImageCHW vel(item.x0.c, item.x0.h, item.x0.w);
      for (size_t i = 0; i < xt.v.size(); ++i) {
        xt.v[i] = (1.0 - item.t_cont) * item.x0.v[i] + item.t_cont * item.eps.v[i];
        vel.v[i] = item.eps.v[i] - item.x0.v[i];
      }
      target = ref_patchify(vel, cfg.patch);
      t_value = item.t_cont * (T_sched - 1);
    }

    RefForward fr = ref_forward(P, cfg, xt, t_value, item.label);

    double se = 0.0;
    int count = 0;
    for (size_t r = 0; r < fr.eps.size(); ++r)
      for (size_t c = 0; c < fr.eps[r].size(); ++c) {
        const double d = fr.eps[r][c] - target[r][c];
        se += d * d;
        ++count;
      }
    out.mse += se / count;

    if (train.objective == ditmoe::Objective::ddpm && cfg.learned_sigma) {
      Mat xt_tok = ref_patchify(xt, cfg.patch);
      Mat x0_tok = ref_patchify(item.x0, cfg.patch);
      const double abar = s.abars[t_idx];
      const double abar_prev = s.abars_prev[t_idx];
      const double beta = s.betas[t_idx];
      const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
      const double c1 = std::sqrt(s.alphas[t_idx]) * (1.0 - abar_prev) / (1.0 - abar);
      const double post_var = beta * (1.0 - abar_prev) / (1.0 - abar);
      double tilde = post_var;
      if (t_idx == 0)
        tilde = T_sched > 1 ? s.betas[1] * (1.0 - s.abars_prev[1]) / (1.0 - s.abars[1]) : beta;
      const double log_tilde = std::log(tilde);
      const double log_beta = std::log(beta);

      double vlb = 0.0;
      int dims = 0;
      for (size_t r = 0; r < xt_tok.size(); ++r)
        for (size_t c = 0; c < xt_tok[r].size(); ++c) {
          const double x0_hat =
              (xt_tok[r][c] - std::sqrt(1.0 - abar) * fr.eps[r][c]) / std::sqrt(abar);
          const double model_mean = c0 * x0_hat + c1 * xt_tok[r][c];
          double frac = (fr.sigma[r][c] + 1.0) / 2.0;
          frac = std::min(1.0, std::max(0.0, frac));
          const double logvar = frac * log_beta + (1.0 - frac) * log_tilde;
          if (t_idx == 0) {
            const double sd = std::exp(0.5 * logvar);
            const double x = x0_tok[r][c];
            const double hi = ncdf((x + 1.0 / 255.0 - model_mean) / sd);
            const double lo = ncdf((x - 1.0 / 255.0 - model_mean) / sd);
            double prob;
            if (x <= -1.0 + 1.0 / 255.0)
              prob = hi;
            else if (x >= 1.0 - 1.0 / 255.0)
              prob = 1.0 - lo;
            else
              prob = hi - lo;
            vlb += -std::log(std::max(prob, 1e-12));
          } else {
            const double q_mean = c0 * x0_tok[r][c] + c1 * xt_tok[r][c];
            const double delta = q_mean - model_mean;
            vlb += 0.5 * (logvar - std::log(post_var)) +
                   (post_var + delta * delta) / (2.0 * std::exp(logvar)) - 0.5;
          }
          ++dims;
        }
      out.vlb += vlb / dims;
    }

    for (const RefMoeOut& mo : fr.moe) {
      const int n = cfg.moe.num_experts;
      const int tok = static_cast<int>(mo.selected.size());
      std::vector<double> countv(n, 0.0), pbar(n, 0.0);
      for (int r = 0; r < tok; ++r) {
        for (int e : mo.selected[r]) countv[e] += 1.0;
        for (int e = 0; e < n; ++e) pbar[e] += mo.probs[r][e];
      }
      double acc = 0.0;
      for (int e = 0; e < n; ++e)
        acc += (n * countv[e] / (static_cast<double>(cfg.moe.top_k) * tok)) * (pbar[e] / tok);
      bal_sum += cfg.moe.alpha * acc;
      ++bal_terms;
    }
  }

  const int B = static_cast<int>(items.size());
  out.mse /= B;
  out.vlb /= B;
  out.balance = bal_terms > 0 ? bal_sum / bal_terms : 0.0;
  out.total = out.mse + out.vlb + out.balance;
  return out;
}

}  // namespace refmodel
