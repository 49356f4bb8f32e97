// Sparse mixture-of-experts feed-forward layer: softmax router, top-K
// selection without weight renormalization, always-on shared experts, and
// the selection-frequency balance loss.

#pragma once

#include <optional>
#include <vector>

#include "ditmoe/autodiff.hpp"
#include "ditmoe/tensor.hpp"

namespace ditmoe {

enum class ExpertForm {
  gated,      // W2 (gelu(W1 x) * (W3 x))
  plain_gelu  // W2 gelu(W1 x)
};

struct MoeConfig {
  int num_experts = 8;
  int top_k = 2;
  int num_shared = 2;
  double alpha = 0.005;             // balance loss weight
  double routed_hidden_ratio = 4.0; // hidden width of routed experts, in units of D
  double shared_hidden_ratio = 1.0; // hidden width of each shared expert
  ExpertForm form = ExpertForm::gated;

  void validate() const;
  int routed_hidden(int width) const;
  int shared_hidden(int width) const;
};

// Per-token routing outcome. weights are the selected softmax probabilities
// taken as-is (no renormalization); selected indices are the K
// largest-probability experts, ties resolved toward the lower index.
struct RouterDecision {
  std::vector<double> probs;    // full distribution over experts
  std::vector<int> selected;    // K expert ids
  std::vector<double> weights;  // gate values for the selected ids
};

// One recorded routing event. layer is the MoE layer ordinal (0-based over
// MoE layers only); step_ordinal counts sampling steps from the noisiest.
struct RoutingEvent {
  int layer = 0;
  int token = 0;
  int step_ordinal = 0;
  int timestep = 0;
  int class_label = 0;
  std::vector<int> selected;
};

struct RoutingTrace {
  int top_k = 0;
  std::vector<RoutingEvent> events;
};

// Context under which moe_forward appends events to a trace.
struct TraceContext {
  RoutingTrace* trace = nullptr;
  int layer = 0;
  int step_ordinal = 0;
  int timestep = 0;
  int class_label = 0;
};

// Softmax gate over experts for a single token. router_weights is [D, n].
std::vector<double> gate(const Tensor& router_weights, const std::vector<double>& x_token);

// Top-K selection from a probability vector.
RouterDecision top_k_select(const std::vector<double>& probs, int k);

struct ExpertVars {
  Var w1;  // [D, H]
  Var w2;  // [H, D]
  Var w3;  // [D, H], gated form only
};

Var expert_forward(const ExpertVars& e, const Var& x, ExpertForm form);

struct MoeLayerVars {
  Var router;                      // [D, n]
  std::vector<ExpertVars> experts; // n routed
  std::vector<ExpertVars> shared;  // num_shared, applied to every token
};

struct MoeForwardResult {
  Var output;                           // [T, D]
  Var probs;                            // [T, n] router distribution (on tape)
  std::vector<RouterDecision> decisions;  // one per token
};

// Full layer: output_t = sum_selected w_i expert_i(x_t) + sum_shared s_j(x_t).
MoeForwardResult moe_forward(const MoeLayerVars& layer, const Var& tokens, const MoeConfig& cfg,
                             const TraceContext* trace_ctx = nullptr);

// Balance loss alpha * sum_i f_i Pbar_i with f_i = (n / (K T)) * count_i and
// Pbar_i the mean router probability of expert i over the T tokens.
double balance_loss(const std::vector<RouterDecision>& decisions, const MoeConfig& cfg);
// Differentiable variant: probs carries the gradient, selections are fixed.
Var balance_loss_var(const Var& probs, const std::vector<RouterDecision>& decisions,
                     const MoeConfig& cfg);

}  // namespace ditmoe
