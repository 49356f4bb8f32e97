// Router gate, top-K selection, expert feed-forwards, the assembled MoE
// layer and the balance loss. Oracles: a test-local softmax, dense mixture
// computation by triple loop, exhaustive enumeration of small assignment
// spaces, and finite differences for the balance gradient.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "ditmoe/moe.hpp"

using namespace ditmoe;

namespace {

// Test-local softmax, straight from the definition.
std::vector<double> softmax_ref(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Tensor random_tensor(Rng& rng, int r, int c, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.v) v = scale * rng.normal();
  return t;
}

// Test-local expert: y = gelu(x W1) [* (x W3)] W2 by explicit loops.
std::vector<double> expert_ref(const Tensor& w1, const Tensor& w2, const Tensor* w3,
                               const std::vector<double>& x) {
  const int D = w1.rows, H = w1.cols;
  std::vector<double> h(H, 0.0);
  for (int j = 0; j < H; ++j) {
    double a = 0.0;
    for (int d = 0; d < D; ++d) a += x[d] * w1.at(d, j);
    h[j] = gelu_ref(a);
    if (w3) {
      double b = 0.0;
      for (int d = 0; d < D; ++d) b += x[d] * w3->at(d, j);
      h[j] *= b;
    }
  }
  std::vector<double> y(w2.cols, 0.0);
  for (int d = 0; d < w2.cols; ++d)
    for (int j = 0; j < H; ++j) y[d] += h[j] * w2.at(j, d);
  return y;
}

// Test-local balance loss, straight from the definition:
// alpha * sum_i f_i Pbar_i, f_i = n / (K T) * count_i.
double balance_ref(const std::vector<RouterDecision>& dec, int n, int k, double alpha) {
  const int T = static_cast<int>(dec.size());
  std::vector<double> count(n, 0.0), pbar(n, 0.0);
  for (const RouterDecision& d : dec) {
    for (int e : d.selected) count[e] += 1.0;
    for (int i = 0; i < n; ++i) pbar[i] += d.probs[i];
  }
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += (n * count[i] / (static_cast<double>(k) * T)) * (pbar[i] / T);
  return alpha * acc;
}

ExpertVars make_expert(Rng& rng, int D, int H, ExpertForm form, double scl = 0.5) {
  ExpertVars e;
  e.w1 = Var::leaf(random_tensor(rng, D, H, scl));
  e.w2 = Var::leaf(random_tensor(rng, H, D, scl));
  if (form == ExpertForm::gated) e.w3 = Var::leaf(random_tensor(rng, D, H, scl));
  return e;
}

MoeLayerVars make_layer(Rng& rng, int D, const MoeConfig& cfg) {
  MoeLayerVars layer;
  layer.router = Var::leaf(random_tensor(rng, D, cfg.num_experts, 0.8));
  for (int e = 0; e < cfg.num_experts; ++e)
    layer.experts.push_back(make_expert(rng, D, cfg.routed_hidden(D), cfg.form));
  for (int s = 0; s < cfg.num_shared; ++s)
    layer.shared.push_back(make_expert(rng, D, cfg.shared_hidden(D), cfg.form));
  return layer;
}

}  // namespace

TEST_CASE("config validation and hidden widths") {
  MoeConfig cfg;
  cfg.validate();  // defaults are fine
  CHECK(cfg.routed_hidden(384) == 1536);
  CHECK(cfg.shared_hidden(384) == 384);
  cfg.routed_hidden_ratio = 6.0;
  CHECK(cfg.routed_hidden(8) == 48);

  MoeConfig bad = cfg;
  bad.top_k = 0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.top_k = cfg.num_experts + 1;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.num_experts = 0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.num_shared = -1;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.alpha = -0.1;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.routed_hidden_ratio = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("gate is a softmax over router logits") {
  // Zero weights: every expert equally likely.
  Tensor zero_router(3, 4);
  std::vector<double> p = gate(zero_router, {0.3, -0.7, 1.1});
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  // 1-dim token so the logits are the router row itself.
  Tensor router = Tensor::row({2.0, 1.0, 0.0, 0.0});
  std::vector<double> probs = gate(router, {1.0});
  std::vector<double> want = softmax_ref({2.0, 1.0, 0.0, 0.0});
  REQUIRE(probs.size() == 4);
  double sum = 0.0;
  for (int i = 0; i < 4; ++i) {
    CHECK(probs[i] == doctest::Approx(want[i]).epsilon(1e-12));
    sum += probs[i];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(probs[0] == doctest::Approx(0.6103).epsilon(1e-3));
  CHECK(probs[1] == doctest::Approx(0.2245).epsilon(1e-3));
  CHECK(probs[2] == doctest::Approx(0.0826).epsilon(1e-3));

  // Adding a constant to every logit leaves the distribution unchanged.
  Tensor shifted = Tensor::row({2.0 + 37.5, 1.0 + 37.5, 37.5, 37.5});
  std::vector<double> probs2 = gate(shifted, {1.0});
  for (int i = 0; i < 4; ++i) CHECK(probs2[i] == doctest::Approx(probs[i]).epsilon(1e-12));

  // Generic case against the reference softmax.
  Rng rng(2);
  Tensor r = random_tensor(rng, 5, 3);
  std::vector<double> x{0.2, -1.0, 0.5, 2.0, -0.3};
  std::vector<double> logits(3, 0.0);
  for (int e = 0; e < 3; ++e)
    for (int d = 0; d < 5; ++d) logits[e] += x[d] * r.at(d, e);
  std::vector<double> got = gate(r, x);
  std::vector<double> ref = softmax_ref(logits);
  for (int e = 0; e < 3; ++e) CHECK(got[e] == doctest::Approx(ref[e]).epsilon(1e-12));

  CHECK_THROWS(gate(r, {1.0, 2.0}));  // dimension mismatch
}

TEST_CASE("top-k selection: order, ties, weights") {
  RouterDecision d = top_k_select({0.5, 0.3, 0.1, 0.1}, 2);
  REQUIRE(d.selected.size() == 2);
  CHECK(d.selected[0] == 0);
  CHECK(d.selected[1] == 1);
  CHECK(d.weights[0] == 0.5);
  CHECK(d.weights[1] == 0.3);
  // No renormalization: the weights sum to 0.8, not 1.
  CHECK(d.weights[0] + d.weights[1] == doctest::Approx(0.8).epsilon(1e-15));

  // Ties resolve toward the lower expert id.
  RouterDecision tie = top_k_select({0.4, 0.4, 0.2}, 1);
  CHECK(tie.selected[0] == 0);
  RouterDecision tie2 = top_k_select({0.3, 0.3, 0.3, 0.1}, 2);
  CHECK(tie2.selected[0] == 0);
  CHECK(tie2.selected[1] == 1);

  // K = n selects everyone and the weights recover the full distribution.
  RouterDecision all = top_k_select({0.1, 0.2, 0.4, 0.3}, 4);
  double sum = 0.0;
  for (double w : all.weights) sum += w;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<int> sel = all.selected;
  std::sort(sel.begin(), sel.end());
  for (int i = 0; i < 4; ++i) CHECK(sel[i] == i);

  // weights[j] is probs[selected[j]] verbatim.
  for (size_t j = 0; j < all.selected.size(); ++j)
    CHECK(all.weights[j] == all.probs[all.selected[j]]);

  CHECK_THROWS(top_k_select({}, 1));
  CHECK_THROWS(top_k_select({0.5, 0.5}, 3));
  CHECK_THROWS(top_k_select({0.5, 0.5}, 0));
}

TEST_CASE("expert feed-forward in both forms") {
  // Zero input maps to zero output.
  Rng rng(3);
  for (ExpertForm form : {ExpertForm::plain_gelu, ExpertForm::gated}) {
    ExpertVars e = make_expert(rng, 3, 5, form);
    Var x = Var::constant(Tensor(2, 3));
    Var y = expert_forward(e, x, form);
    for (double v : y.val().v) CHECK(v == 0.0);
  }

  // 1x1 plain expert with unit weights is the gelu itself.
  ExpertVars unit;
  unit.w1 = Var::constant(Tensor::full(1, 1, 1.0));
  unit.w2 = Var::constant(Tensor::full(1, 1, 1.0));
  Var one = Var::constant(Tensor::full(1, 1, 1.0));
  CHECK(expert_forward(unit, one, ExpertForm::plain_gelu).scalar() ==
        doctest::Approx(0.8413447460685429).epsilon(1e-12));

  // 1x1 gated expert multiplies in the linear gate branch.
  unit.w3 = Var::constant(Tensor::full(1, 1, 1.0));
  for (double xv : {-1.5, 0.4, 2.0}) {
    Var x = Var::constant(Tensor::full(1, 1, xv));
    CHECK(expert_forward(unit, x, ExpertForm::gated).scalar() ==
          doctest::Approx(gelu_ref(xv) * xv).epsilon(1e-12));
  }

  // Generic shapes against the loop oracle.
  for (ExpertForm form : {ExpertForm::plain_gelu, ExpertForm::gated}) {
    ExpertVars e = make_expert(rng, 4, 7, form);
    Tensor xt = random_tensor(rng, 3, 4);
    Var y = expert_forward(e, Var::constant(xt), form);
    for (int r = 0; r < 3; ++r) {
      std::vector<double> row(xt.v.begin() + r * 4, xt.v.begin() + (r + 1) * 4);
      std::vector<double> want =
          expert_ref(e.w1.val(), e.w2.val(),
                     form == ExpertForm::gated ? &e.w3.val() : nullptr, row);
      for (int c = 0; c < 4; ++c)
        CHECK(y.val().at(r, c) == doctest::Approx(want[c]).epsilon(1e-12));
    }
  }

  // Gated form without w3 is an error.
  ExpertVars missing;
  missing.w1 = Var::constant(Tensor::full(1, 1, 1.0));
  missing.w2 = Var::constant(Tensor::full(1, 1, 1.0));
  CHECK_THROWS(expert_forward(missing, one, ExpertForm::gated));
}

TEST_CASE("moe layer with identical experts is a scalar multiple of one expert") {
  Rng rng(4);
  MoeConfig cfg;
  cfg.num_experts = 4;
  cfg.top_k = 2;
  cfg.num_shared = 2;
  const int D = 6;

  ExpertVars proto = make_expert(rng, D, cfg.routed_hidden(D), cfg.form);
  ExpertVars proto_shared = make_expert(rng, D, cfg.shared_hidden(D), cfg.form);

  MoeLayerVars layer;
  layer.router = Var::leaf(random_tensor(rng, D, cfg.num_experts));
  for (int e = 0; e < cfg.num_experts; ++e) layer.experts.push_back(proto);
  for (int s = 0; s < cfg.num_shared; ++s) layer.shared.push_back(proto_shared);

  Tensor tokens = random_tensor(rng, 5, D);
  MoeForwardResult res = moe_forward(layer, Var::constant(tokens), cfg);

  Var routed_once = expert_forward(proto, Var::constant(tokens), cfg.form);
  Var shared_once = expert_forward(proto_shared, Var::constant(tokens), cfg.form);
  for (int t = 0; t < 5; ++t) {
    const RouterDecision& d = res.decisions[t];
    const double wsum = d.weights[0] + d.weights[1];
    for (int c = 0; c < D; ++c) {
      const double want = wsum * routed_once.val().at(t, c) + 2.0 * shared_once.val().at(t, c);
      CHECK(res.output.val().at(t, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("moe layer with k = n and no shared experts is the dense mixture") {
  Rng rng(5);
  MoeConfig cfg;
  cfg.num_experts = 3;
  cfg.top_k = 3;
  cfg.num_shared = 0;
  const int D = 4;
  MoeLayerVars layer = make_layer(rng, D, cfg);
  Tensor tokens = random_tensor(rng, 6, D);
  MoeForwardResult res = moe_forward(layer, Var::constant(tokens), cfg);

  for (int t = 0; t < 6; ++t) {
    std::vector<double> x(tokens.v.begin() + t * D, tokens.v.begin() + (t + 1) * D);
    std::vector<double> probs = gate(layer.router.val(), x);
    std::vector<double> want(D, 0.0);
    for (int e = 0; e < 3; ++e) {
      std::vector<double> y = expert_ref(layer.experts[e].w1.val(), layer.experts[e].w2.val(),
                                         &layer.experts[e].w3.val(), x);
      for (int c = 0; c < D; ++c) want[c] += probs[e] * y[c];
    }
    for (int c = 0; c < D; ++c)
      CHECK(res.output.val().at(t, c) == doctest::Approx(want[c]).epsilon(1e-10));
  }
}

TEST_CASE("moe forward: decisions, probs and trace bookkeeping") {
  Rng rng(6);
  MoeConfig cfg;
  cfg.num_experts = 4;
  cfg.top_k = 2;
  cfg.num_shared = 1;
  const int D = 5, T = 7;
  MoeLayerVars layer = make_layer(rng, D, cfg);
  Tensor tokens = random_tensor(rng, T, D);

  RoutingTrace trace;
  trace.top_k = cfg.top_k;
  TraceContext ctx;
  ctx.trace = &trace;
  ctx.layer = 3;
  ctx.step_ordinal = 12;
  ctx.timestep = 880;
  ctx.class_label = 2;

  MoeForwardResult res = moe_forward(layer, Var::constant(tokens), cfg, &ctx);
  REQUIRE(res.decisions.size() == T);
  CHECK(res.probs.rows() == T);
  CHECK(res.probs.cols() == cfg.num_experts);

  for (int t = 0; t < T; ++t) {
    const RouterDecision& d = res.decisions[t];
    REQUIRE(static_cast<int>(d.selected.size()) == cfg.top_k);
    // Selected ids are distinct and in range; probs row matches the Var.
    CHECK(d.selected[0] != d.selected[1]);
    for (int id : d.selected) {
      CHECK(id >= 0);
      CHECK(id < cfg.num_experts);
    }
    for (int e = 0; e < cfg.num_experts; ++e)
      CHECK(d.probs[e] == res.probs.val().at(t, e));
  }

  REQUIRE(trace.events.size() == static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    const RoutingEvent& ev = trace.events[t];
    CHECK(ev.layer == 3);
    CHECK(ev.token == t);
    CHECK(ev.step_ordinal == 12);
    CHECK(ev.timestep == 880);
    CHECK(ev.class_label == 2);
    CHECK(ev.selected == res.decisions[t].selected);
  }

  // No context: no events recorded.
  MoeForwardResult quiet = moe_forward(layer, Var::constant(tokens), cfg);
  CHECK(quiet.decisions.size() == T);

  // Shape validation.
  MoeLayerVars broken = make_layer(rng, D, cfg);
  broken.experts.pop_back();
  CHECK_THROWS(moe_forward(broken, Var::constant(tokens), cfg));
}

TEST_CASE("balance loss closed forms") {
  MoeConfig cfg;
  cfg.num_experts = 4;
  cfg.top_k = 2;
  cfg.alpha = 0.01;

  // Perfectly uniform: every expert equally probable and equally used.
  std::vector<RouterDecision> uniform;
  const int pairs[6][2] = {{0, 1}, {2, 3}, {0, 2}, {1, 3}, {0, 3}, {1, 2}};
  for (auto& pr : pairs) {
    RouterDecision d;
    d.probs = {0.25, 0.25, 0.25, 0.25};
    d.selected = {pr[0], pr[1]};
    d.weights = {0.25, 0.25};
    uniform.push_back(d);
  }
  CHECK(std::abs(balance_loss(uniform, cfg) - cfg.alpha) <= 1e-12);

  // Fully concentrated on experts {0, 1}: exactly 2 alpha.
  std::vector<RouterDecision> conc;
  for (int t = 0; t < 3; ++t) {
    RouterDecision d;
    d.probs = {0.5, 0.5, 0.0, 0.0};
    d.selected = {0, 1};
    d.weights = {0.5, 0.5};
    conc.push_back(d);
  }
  CHECK(std::abs(balance_loss(conc, cfg) - 2.0 * cfg.alpha) <= 1e-12);

  // alpha = 0 switches the loss off entirely.
  MoeConfig off = cfg;
  off.alpha = 0.0;
  CHECK(balance_loss(conc, off) == 0.0);

  // Loss scales linearly in alpha.
  MoeConfig twice = cfg;
  twice.alpha = 0.02;
  CHECK(balance_loss(conc, twice) == doctest::Approx(2 * balance_loss(conc, cfg)).epsilon(1e-15));
}

TEST_CASE("balance loss: enumeration, permutation and relabeling") {
  MoeConfig cfg;
  cfg.num_experts = 4;
  cfg.top_k = 1;
  cfg.alpha = 0.005;

  // Exhaustive enumeration of all 4^4 single-expert assignments over four
  // tokens with fixed, non-uniform probabilities.
  Rng rng(7);
  std::vector<std::vector<double>> probs(4);
  for (auto& p : probs) {
    std::vector<double> logits(4);
    for (double& l : logits) l = rng.normal();
    p = softmax_ref(logits);
  }
  for (int code = 0; code < 256; ++code) {
    std::vector<RouterDecision> dec(4);
    int c = code;
    for (int t = 0; t < 4; ++t, c /= 4) {
      dec[t].probs = probs[t];
      dec[t].selected = {c % 4};
      dec[t].weights = {probs[t][c % 4]};
    }
    const double want = balance_ref(dec, 4, 1, cfg.alpha);
    CHECK(balance_loss(dec, cfg) == doctest::Approx(want).epsilon(1e-13));
  }

  // Token order does not matter.
  std::vector<RouterDecision> dec(5);
  MoeConfig cfg2;
  cfg2.num_experts = 4;
  cfg2.top_k = 2;
  cfg2.alpha = 0.005;
  for (auto& d : dec) {
    std::vector<double> logits(4);
    for (double& l : logits) l = rng.normal();
    d = top_k_select(softmax_ref(logits), 2);
  }
  std::vector<RouterDecision> shuffled{dec[3], dec[0], dec[4], dec[2], dec[1]};
  CHECK(balance_loss(dec, cfg2) == doctest::Approx(balance_loss(shuffled, cfg2)).epsilon(1e-12));

  // Relabeling the experts consistently leaves the loss unchanged.
  const int perm[4] = {2, 0, 3, 1};
  std::vector<RouterDecision> relabeled = dec;
  for (auto& d : relabeled) {
    std::vector<double> np(4);
    for (int i = 0; i < 4; ++i) np[perm[i]] = d.probs[i];
    d.probs = np;
    for (size_t j = 0; j < d.selected.size(); ++j) d.selected[j] = perm[d.selected[j]];
  }
  CHECK(balance_loss(dec, cfg2) == doctest::Approx(balance_loss(relabeled, cfg2)).epsilon(1e-10));
}

TEST_CASE("balance loss gradient flows through the probabilities") {
  Rng rng(8);
  MoeConfig cfg;
  cfg.num_experts = 4;
  cfg.top_k = 2;
  cfg.num_shared = 0;
  cfg.alpha = 0.005;
  const int D = 5, T = 6;
  MoeLayerVars layer = make_layer(rng, D, cfg);
  Tensor tokens = random_tensor(rng, T, D);

  // Routing must be stable under the finite-difference perturbation; demand
  // a healthy probability margin at the selection boundary first.
  MoeForwardResult base = moe_forward(layer, Var::constant(tokens), cfg);
  for (const RouterDecision& d : base.decisions) {
    std::vector<double> sorted = d.probs;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    REQUIRE(sorted[cfg.top_k - 1] - sorted[cfg.top_k] > 1e-3);
  }

  Var loss = balance_loss_var(base.probs, base.decisions, cfg);
  CHECK(loss.scalar() == doctest::Approx(balance_loss(base.decisions, cfg)).epsilon(1e-12));
  backward(loss);
  Tensor analytic = layer.router.grad();

  Tensor& rv = layer.router.node_->val;
  for (size_t i = 0; i < rv.v.size(); ++i) {
    const double orig = rv.v[i];
    const double h = 1e-6;
    double fp, fm;
    {
      NoGradGuard guard;
      rv.v[i] = orig + h;
      MoeForwardResult r1 = moe_forward(layer, Var::constant(tokens), cfg);
      fp = balance_loss(r1.decisions, cfg);
      rv.v[i] = orig - h;
      MoeForwardResult r2 = moe_forward(layer, Var::constant(tokens), cfg);
      fm = balance_loss(r2.decisions, cfg);
      rv.v[i] = orig;
      // Selection stability under the perturbation.
      for (int t = 0; t < T; ++t) {
        REQUIRE(r1.decisions[t].selected == base.decisions[t].selected);
        REQUIRE(r2.decisions[t].selected == base.decisions[t].selected);
      }
    }
    const double fd = (fp - fm) / (2 * h);
    const double ad = analytic.v[i];
    CHECK(std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-4}) < 1e-4);
  }
}
