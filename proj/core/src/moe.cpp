#include "ditmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ditmoe {

void MoeConfig::validate() const {
  if (num_experts < 1) throw std::invalid_argument("MoeConfig: num_experts must be >= 1");
  if (top_k < 1 || top_k > num_experts)
    throw std::invalid_argument("MoeConfig: top_k must lie in [1, num_experts]");
  if (num_shared < 0) throw std::invalid_argument("MoeConfig: num_shared must be >= 0");
  if (!(alpha >= 0.0)) throw std::invalid_argument("MoeConfig: alpha must be >= 0");
  if (!(routed_hidden_ratio > 0.0) || !(shared_hidden_ratio > 0.0))
    throw std::invalid_argument("MoeConfig: hidden ratios must be positive");
}

int MoeConfig::routed_hidden(int width) const {
  return static_cast<int>(routed_hidden_ratio * width + 0.5);
}

int MoeConfig::shared_hidden(int width) const {
  return static_cast<int>(shared_hidden_ratio * width + 0.5);
}

std::vector<double> gate(const Tensor& router_weights, const std::vector<double>& x_token) {
  if (static_cast<size_t>(router_weights.rows) != x_token.size())
    throw std::invalid_argument("gate: token dimension does not match router");
  const int n = router_weights.cols;
  std::vector<double> logits(n, 0.0);
  for (int d = 0; d < router_weights.rows; ++d) {
    const double x = x_token[d];
    for (int e = 0; e < n; ++e) logits[e] += x * router_weights.at(d, e);
  }
  double mx = -1e300;
  for (double l : logits) {
    if (!std::isfinite(l)) throw std::invalid_argument("gate: non-finite logit");
    mx = std::max(mx, l);
  }
  double sum = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (double& l : logits) l /= sum;
  return logits;
}

RouterDecision top_k_select(const std::vector<double>& probs, int k) {
  const int n = static_cast<int>(probs.size());
  if (n == 0) throw std::invalid_argument("top_k_select: empty probability vector");
  if (k < 1 || k > n) throw std::invalid_argument("top_k_select: k must lie in [1, n]");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Stable sort on descending probability; equal probabilities keep index
  // order, which is the tie-break toward the lower expert id.
  std::stable_sort(order.begin(), order.end(),
                   [&probs](int a, int b) { return probs[a] > probs[b]; });
  RouterDecision d;
  d.probs = probs;
  d.selected.assign(order.begin(), order.begin() + k);
  d.weights.resize(k);
  for (int i = 0; i < k; ++i) d.weights[i] = probs[d.selected[i]];
  return d;
}

Var expert_forward(const ExpertVars& e, const Var& x, ExpertForm form) {
  Var h = vgelu(matmul(x, e.w1));
  if (form == ExpertForm::gated) {
    if (!e.w3.defined()) throw std::invalid_argument("expert_forward: gated form requires w3");
    h = mul(h, matmul(x, e.w3));
  }
  return matmul(h, e.w2);
}

MoeForwardResult moe_forward(const MoeLayerVars& layer, const Var& tokens, const MoeConfig& cfg,
                             const TraceContext* trace_ctx) {
  cfg.validate();
  const int T = tokens.rows();
  const int n = cfg.num_experts;
  if (layer.router.cols() != n) throw std::invalid_argument("moe_forward: router width != num_experts");
  if (static_cast<int>(layer.experts.size()) != n)
    throw std::invalid_argument("moe_forward: expert count != num_experts");
  if (static_cast<int>(layer.shared.size()) != cfg.num_shared)
    throw std::invalid_argument("moe_forward: shared expert count mismatch");

  MoeForwardResult res;
  res.probs = softmax_rows(matmul(tokens, layer.router));
  res.decisions.reserve(T);
  const Tensor& pv = res.probs.val();
  for (int t = 0; t < T; ++t) {
    std::vector<double> row(pv.v.begin() + static_cast<size_t>(t) * n,
                            pv.v.begin() + static_cast<size_t>(t + 1) * n);
    res.decisions.push_back(top_k_select(row, cfg.top_k));
    if (trace_ctx && trace_ctx->trace) {
      RoutingEvent ev;
      ev.layer = trace_ctx->layer;
      ev.token = t;
      ev.step_ordinal = trace_ctx->step_ordinal;
      ev.timestep = trace_ctx->timestep;
      ev.class_label = trace_ctx->class_label;
      ev.selected = res.decisions.back().selected;
      trace_ctx->trace->events.push_back(std::move(ev));
    }
  }

  // Routed path, grouped by expert: gather the tokens that picked expert e,
  // run the expert once, weight rows by their gate values and scatter back.
  Var out;
  bool have_out = false;
  for (int e = 0; e < n; ++e) {
    std::vector<int> rows, cols;
    for (int t = 0; t < T; ++t)
      for (int idx : res.decisions[t].selected)
        if (idx == e) {
          rows.push_back(t);
          cols.push_back(e);
        }
    if (rows.empty()) continue;
    Var xe = gather_rows(tokens, rows);
    Var ye = expert_forward(layer.experts[e], xe, cfg.form);
    Var we = gather_cells(res.probs, rows, cols);
    Var contribution = scatter_rows(rows, mul_colvec(ye, we), T);
    out = have_out ? add(out, contribution) : contribution;
    have_out = true;
  }
  if (!have_out) out = Var::constant(Tensor(T, tokens.cols()));

  // Shared experts see every token with unit weight.
  for (const ExpertVars& se : layer.shared) out = add(out, expert_forward(se, tokens, cfg.form));

  res.output = out;
  return res;
}

namespace {

std::vector<double> selection_f(const std::vector<RouterDecision>& decisions, const MoeConfig& cfg) {
  const int n = cfg.num_experts;
  const size_t T = decisions.size();
  std::vector<double> f(n, 0.0);
  for (const RouterDecision& d : decisions) {
    if (static_cast<int>(d.selected.size()) != cfg.top_k)
      throw std::invalid_argument("balance_loss: decision K != config top_k");
    for (int e : d.selected) {
      if (e < 0 || e >= n) throw std::out_of_range("balance_loss: expert id out of range");
      f[e] += 1.0;
    }
  }
  const double scale = static_cast<double>(n) / (static_cast<double>(cfg.top_k) * T);
  for (double& x : f) x *= scale;
  return f;
}

}  // namespace

double balance_loss(const std::vector<RouterDecision>& decisions, const MoeConfig& cfg) {
  cfg.validate();
  if (decisions.empty()) throw std::invalid_argument("balance_loss: no tokens");
  const int n = cfg.num_experts;
  const std::vector<double> f = selection_f(decisions, cfg);
  std::vector<double> pbar(n, 0.0);
  for (const RouterDecision& d : decisions) {
    if (static_cast<int>(d.probs.size()) != n)
      throw std::invalid_argument("balance_loss: probs size != num_experts");
    for (int e = 0; e < n; ++e) pbar[e] += d.probs[e];
  }
  double loss = 0.0;
  for (int e = 0; e < n; ++e) loss += f[e] * (pbar[e] / decisions.size());
  return cfg.alpha * loss;
}

Var balance_loss_var(const Var& probs, const std::vector<RouterDecision>& decisions,
                     const MoeConfig& cfg) {
  cfg.validate();
  if (decisions.empty()) throw std::invalid_argument("balance_loss: no tokens");
  if (probs.rows() != static_cast<int>(decisions.size()) || probs.cols() != cfg.num_experts)
    throw std::invalid_argument("balance_loss: probs shape mismatch");
  const std::vector<double> f = selection_f(decisions, cfg);
  Tensor frow(1, cfg.num_experts);
  frow.v.assign(f.begin(), f.end());
  Var pbar = mean_over_rows(probs);
  return scale(sum_all(mul(pbar, Var::constant(frow))), cfg.alpha);
}

}  // namespace ditmoe
