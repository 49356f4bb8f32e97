#include "ditmoe/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace ditmoe {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void AdNode::accumulate(const Tensor& g) {
  if (!grad_ready) {
    grad = Tensor(val.rows, val.cols);
    grad_ready = true;
  }
  if (!grad.same_shape(g)) throw std::invalid_argument("autodiff: gradient shape mismatch");
  for (size_t i = 0; i < grad.v.size(); ++i) grad.v[i] += g.v[i];
}

Var Var::leaf(Tensor value, bool requires_grad) {
  Var v;
  v.node_ = std::make_shared<AdNode>();
  v.node_->val = std::move(value);
  v.node_->requires_grad = requires_grad;
  return v;
}

Var Var::constant(Tensor value) { return leaf(std::move(value), false); }

const Tensor& Var::val() const {
  if (!node_) throw std::logic_error("Var: undefined");
  return node_->val;
}

const Tensor& Var::grad() const {
  if (!node_) throw std::logic_error("Var: undefined");
  if (!node_->grad_ready) throw std::logic_error("Var: gradient not computed");
  return node_->grad;
}

double Var::scalar() const {
  const Tensor& t = val();
  if (t.rows != 1 || t.cols != 1) throw std::invalid_argument("Var::scalar: not 1x1");
  return t.v[0];
}

namespace {

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(AdNode&)> backfn) {
  Var out;
  out.node_ = std::make_shared<AdNode>();
  out.node_->val = std::move(value);
  if (g_grad_enabled) {
    bool need = false;
    for (const Var& p : parents)
      if (p.requires_grad()) need = true;
    if (need) {
      out.node_->requires_grad = true;
      for (Var& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backfn = std::move(backfn);
    }
  }
  return out;
}

void check_defined(const Var& v, const char* who) {
  if (!v.defined()) throw std::invalid_argument(std::string(who) + ": undefined Var");
}

}  // namespace

void backward(const Var& loss) {
  check_defined(loss, "backward");
  const Tensor& lv = loss.val();
  if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward: loss must be 1x1");
  if (!loss.node_->requires_grad) return;  // nothing reachable requires grad

  // Iterative post-order topological sort over the requires_grad subgraph.
  std::vector<AdNode*> order;
  std::unordered_set<AdNode*> seen;
  struct Frame {
    AdNode* n;
    size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node_.get(), 0});
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.n->parents.size()) {
      AdNode* child = f.n->parents[f.next_child++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  Tensor seed(1, 1);
  seed.v[0] = 1.0;
  loss.node_->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    AdNode* n = *it;
    if (n->backfn && n->grad_ready) n->backfn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Var& a, const Var& b, const char* who) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

// Shared pattern for unary ops with pointwise derivative computed from the
// input value.
Var pointwise_unary(const Var& a, double (*f)(double), double (*df)(double), const char* who) {
  check_defined(a, who);
  Tensor out = a.val();
  for (double& x : out.v) x = f(x);
  AdNode* an = a.node_.get();
  Tensor saved_in = a.val();
  return make_op(std::move(out), {a}, [an, df, saved_in](AdNode& self) {
    Tensor g(saved_in.rows, saved_in.cols);
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = self.grad.v[i] * df(saved_in.v[i]);
    an->accumulate(g);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  Tensor out = a.val();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.val().v[i];
  AdNode* an = a.node_.get();
  AdNode* bn = b.node_.get();
  return make_op(std::move(out), {a, b}, [an, bn](AdNode& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  Tensor out = a.val();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.val().v[i];
  AdNode* an = a.node_.get();
  AdNode* bn = b.node_.get();
  return make_op(std::move(out), {a, b}, [an, bn](AdNode& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      Tensor g = self.grad;
      for (double& x : g.v) x = -x;
      bn->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  Tensor out = a.val();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.val().v[i];
  AdNode* an = a.node_.get();
  AdNode* bn = b.node_.get();
  Tensor av = a.val(), bv = b.val();
  return make_op(std::move(out), {a, b}, [an, bn, av, bv](AdNode& self) {
    if (an->requires_grad) {
      Tensor g(av.rows, av.cols);
      for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = self.grad.v[i] * bv.v[i];
      an->accumulate(g);
    }
    if (bn->requires_grad) {
      Tensor g(bv.rows, bv.cols);
      for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = self.grad.v[i] * av.v[i];
      bn->accumulate(g);
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  check_defined(a, "scale");
  Tensor out = a.val();
  for (double& x : out.v) x *= s;
  AdNode* an = a.node_.get();
  return make_op(std::move(out), {a}, [an, s](AdNode& self) {
    Tensor g = self.grad;
    for (double& x : g.v) x *= s;
    an->accumulate(g);
  });
}

Var add_scalar(const Var& a, double s) {
  check_defined(a, "add_scalar");
  Tensor out = a.val();
  for (double& x : out.v) x += s;
  AdNode* an = a.node_.get();
  return make_op(std::move(out), {a}, [an](AdNode& self) { an->accumulate(self.grad); });
}

Var square(const Var& a) {
  check_defined(a, "square");
  Tensor out = a.val();
  for (double& x : out.v) x *= x;
  AdNode* an = a.node_.get();
  Tensor av = a.val();
  return make_op(std::move(out), {a}, [an, av](AdNode& self) {
    Tensor g(av.rows, av.cols);
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = self.grad.v[i] * 2.0 * av.v[i];
    an->accumulate(g);
  });
}

namespace {
double f_exp(double x) { return std::exp(x); }
double df_exp(double x) { return std::exp(x); }
double f_log(double x) { return std::log(x); }
double df_log(double x) { return 1.0 / x; }
double f_sqrt(double x) { return std::sqrt(x); }
double df_sqrt(double x) { return 0.5 / std::sqrt(x); }
double f_erf(double x) { return std::erf(x); }
double df_erf(double x) { return 2.0 / std::sqrt(M_PI) * std::exp(-x * x); }
}  // namespace

Var vexp(const Var& a) { return pointwise_unary(a, f_exp, df_exp, "vexp"); }
Var vlog(const Var& a) { return pointwise_unary(a, f_log, df_log, "vlog"); }
Var vsqrt(const Var& a) { return pointwise_unary(a, f_sqrt, df_sqrt, "vsqrt"); }
Var verf(const Var& a) { return pointwise_unary(a, f_erf, df_erf, "verf"); }
Var vgelu(const Var& a) { return pointwise_unary(a, gelu_erf, gelu_erf_grad, "vgelu"); }
Var vsilu(const Var& a) { return pointwise_unary(a, silu_scalar, silu_scalar_grad, "vsilu"); }

Var vclamp(const Var& a, double lo, double hi) {
  check_defined(a, "vclamp");
  if (!(lo <= hi)) throw std::invalid_argument("vclamp: lo > hi");
  Tensor out = a.val();
  for (double& x : out.v) x = x < lo ? lo : (x > hi ? hi : x);
  AdNode* an = a.node_.get();
  Tensor av = a.val();
  return make_op(std::move(out), {a}, [an, av, lo, hi](AdNode& self) {
    Tensor g(av.rows, av.cols);
    for (size_t i = 0; i < g.v.size(); ++i)
      g.v[i] = (av.v[i] > lo && av.v[i] < hi) ? self.grad.v[i] : 0.0;
    an->accumulate(g);
  });
}

Var detach(const Var& a) {
  check_defined(a, "detach");
  return Var::constant(a.val());
}

// ---------------------------------------------------------------------------
// broadcasts
// ---------------------------------------------------------------------------

Var add_rowvec(const Var& a, const Var& rowv) {
  check_defined(a, "add_rowvec");
  check_defined(rowv, "add_rowvec");
  const Tensor& av = a.val();
  const Tensor& rv = rowv.val();
  if (rv.rows != 1 || rv.cols != av.cols) throw std::invalid_argument("add_rowvec: bad row vector");
  Tensor out = av;
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out.at(i, j) += rv.v[j];
  AdNode* an = a.node_.get();
  AdNode* rn = rowv.node_.get();
  return make_op(std::move(out), {a, rowv}, [an, rn](AdNode& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (rn->requires_grad) {
      Tensor g(1, self.grad.cols);
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < self.grad.cols; ++j) g.v[j] += self.grad.at(i, j);
      rn->accumulate(g);
    }
  });
}

Var mul_rowvec(const Var& a, const Var& rowv) {
  check_defined(a, "mul_rowvec");
  check_defined(rowv, "mul_rowvec");
  const Tensor& av = a.val();
  const Tensor& rv = rowv.val();
  if (rv.rows != 1 || rv.cols != av.cols) throw std::invalid_argument("mul_rowvec: bad row vector");
  Tensor out = av;
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out.at(i, j) *= rv.v[j];
  AdNode* an = a.node_.get();
  AdNode* rn = rowv.node_.get();
  Tensor asave = av, rsave = rv;
  return make_op(std::move(out), {a, rowv}, [an, rn, asave, rsave](AdNode& self) {
    if (an->requires_grad) {
      Tensor g(asave.rows, asave.cols);
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) g.at(i, j) = self.grad.at(i, j) * rsave.v[j];
      an->accumulate(g);
    }
    if (rn->requires_grad) {
      Tensor g(1, asave.cols);
      for (int i = 0; i < asave.rows; ++i)
        for (int j = 0; j < asave.cols; ++j) g.v[j] += self.grad.at(i, j) * asave.at(i, j);
      rn->accumulate(g);
    }
  });
}

Var mul_colvec(const Var& a, const Var& colv) {
  check_defined(a, "mul_colvec");
  check_defined(colv, "mul_colvec");
  const Tensor& av = a.val();
  const Tensor& cv = colv.val();
  if (cv.cols != 1 || cv.rows != av.rows) throw std::invalid_argument("mul_colvec: bad column vector");
  Tensor out = av;
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out.at(i, j) *= cv.v[i];
  AdNode* an = a.node_.get();
  AdNode* cn = colv.node_.get();
  Tensor asave = av, csave = cv;
  return make_op(std::move(out), {a, colv}, [an, cn, asave, csave](AdNode& self) {
    if (an->requires_grad) {
      Tensor g(asave.rows, asave.cols);
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) g.at(i, j) = self.grad.at(i, j) * csave.v[i];
      an->accumulate(g);
    }
    if (cn->requires_grad) {
      Tensor g(asave.rows, 1);
      for (int i = 0; i < asave.rows; ++i)
        for (int j = 0; j < asave.cols; ++j) g.v[i] += self.grad.at(i, j) * asave.at(i, j);
      cn->accumulate(g);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  Tensor out = matmul_plain(a.val(), transpose_a, b.val(), transpose_b);
  AdNode* an = a.node_.get();
  AdNode* bn = b.node_.get();
  Tensor asave = a.val(), bsave = b.val();
  return make_op(std::move(out), {a, b}, [an, bn, asave, bsave, transpose_a, transpose_b](AdNode& self) {
    const Tensor& g = self.grad;
    if (an->requires_grad) {
      // d/dA of op(A)op(B): four transpose cases
      Tensor ga = transpose_a ? matmul_plain(bsave, transpose_b, g, true)
                              : matmul_plain(g, false, bsave, !transpose_b);
      an->accumulate(ga);
    }
    if (bn->requires_grad) {
      Tensor gb = transpose_b ? matmul_plain(g, true, asave, transpose_a)
                              : matmul_plain(asave, !transpose_a, g, false);
      bn->accumulate(gb);
    }
  });
}

Var softmax_rows(const Var& a) {
  check_defined(a, "softmax_rows");
  const Tensor& av = a.val();
  Tensor out(av.rows, av.cols);
  for (int i = 0; i < av.rows; ++i) {
    double mx = -1e300;
    for (int j = 0; j < av.cols; ++j) {
      if (!std::isfinite(av.at(i, j)))
        throw std::invalid_argument("softmax_rows: non-finite logit");
      mx = std::max(mx, av.at(i, j));
    }
    double sum = 0.0;
    for (int j = 0; j < av.cols; ++j) {
      const double e = std::exp(av.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < av.cols; ++j) out.at(i, j) /= sum;
  }
  AdNode* an = a.node_.get();
  Tensor ysave = out;
  return make_op(std::move(out), {a}, [an, ysave](AdNode& self) {
    Tensor g(ysave.rows, ysave.cols);
    for (int i = 0; i < ysave.rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < ysave.cols; ++j) dot += self.grad.at(i, j) * ysave.at(i, j);
      for (int j = 0; j < ysave.cols; ++j)
        g.at(i, j) = ysave.at(i, j) * (self.grad.at(i, j) - dot);
    }
    an->accumulate(g);
  });
}

Var layernorm_rows(const Var& a, double eps) {
  check_defined(a, "layernorm_rows");
  if (eps <= 0.0) throw std::invalid_argument("layernorm_rows: eps must be positive");
  const Tensor& av = a.val();
  if (av.cols < 1) throw std::invalid_argument("layernorm_rows: empty rows");
  Tensor out(av.rows, av.cols);
  std::vector<double> inv_std(av.rows);
  for (int i = 0; i < av.rows; ++i) {
    double mean = 0.0;
    for (int j = 0; j < av.cols; ++j) mean += av.at(i, j);
    mean /= av.cols;
    double var = 0.0;
    for (int j = 0; j < av.cols; ++j) {
      const double d = av.at(i, j) - mean;
      var += d * d;
    }
    var /= av.cols;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int j = 0; j < av.cols; ++j) out.at(i, j) = (av.at(i, j) - mean) * is;
  }
  AdNode* an = a.node_.get();
  Tensor ysave = out;
  return make_op(std::move(out), {a}, [an, ysave, inv_std](AdNode& self) {
    const int C = ysave.cols;
    Tensor g(ysave.rows, C);
    for (int i = 0; i < ysave.rows; ++i) {
      double mean_dy = 0.0, mean_dyy = 0.0;
      for (int j = 0; j < C; ++j) {
        mean_dy += self.grad.at(i, j);
        mean_dyy += self.grad.at(i, j) * ysave.at(i, j);
      }
      mean_dy /= C;
      mean_dyy /= C;
      for (int j = 0; j < C; ++j)
        g.at(i, j) = inv_std[i] * (self.grad.at(i, j) - mean_dy - ysave.at(i, j) * mean_dyy);
    }
    an->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// indexing / layout
// ---------------------------------------------------------------------------

Var gather_rows(const Var& a, const std::vector<int>& row_indices) {
  check_defined(a, "gather_rows");
  const Tensor& av = a.val();
  Tensor out(static_cast<int>(row_indices.size()), av.cols);
  for (size_t i = 0; i < row_indices.size(); ++i) {
    const int r = row_indices[i];
    if (r < 0 || r >= av.rows) throw std::out_of_range("gather_rows: row index out of range");
    for (int j = 0; j < av.cols; ++j) out.at(static_cast<int>(i), j) = av.at(r, j);
  }
  AdNode* an = a.node_.get();
  const int in_rows = av.rows;
  return make_op(std::move(out), {a}, [an, row_indices, in_rows](AdNode& self) {
    Tensor g(in_rows, self.grad.cols);
    for (size_t i = 0; i < row_indices.size(); ++i)
      for (int j = 0; j < self.grad.cols; ++j)
        g.at(row_indices[i], j) += self.grad.at(static_cast<int>(i), j);
    an->accumulate(g);
  });
}

Var scatter_rows(const std::vector<int>& row_indices, const Var& rows, int out_rows) {
  check_defined(rows, "scatter_rows");
  const Tensor& rv = rows.val();
  if (static_cast<int>(row_indices.size()) != rv.rows)
    throw std::invalid_argument("scatter_rows: index count != row count");
  Tensor out(out_rows, rv.cols);
  for (size_t i = 0; i < row_indices.size(); ++i) {
    const int r = row_indices[i];
    if (r < 0 || r >= out_rows) throw std::out_of_range("scatter_rows: row index out of range");
    for (int j = 0; j < rv.cols; ++j) out.at(r, j) += rv.at(static_cast<int>(i), j);
  }
  AdNode* rn = rows.node_.get();
  return make_op(std::move(out), {rows}, [rn, row_indices](AdNode& self) {
    Tensor g(static_cast<int>(row_indices.size()), self.grad.cols);
    for (size_t i = 0; i < row_indices.size(); ++i)
      for (int j = 0; j < self.grad.cols; ++j)
        g.at(static_cast<int>(i), j) = self.grad.at(row_indices[i], j);
    rn->accumulate(g);
  });
}

Var gather_cells(const Var& a, const std::vector<int>& row_idx, const std::vector<int>& col_idx) {
  check_defined(a, "gather_cells");
  if (row_idx.size() != col_idx.size())
    throw std::invalid_argument("gather_cells: index lists differ in length");
  const Tensor& av = a.val();
  Tensor out(static_cast<int>(row_idx.size()), 1);
  for (size_t i = 0; i < row_idx.size(); ++i) {
    if (row_idx[i] < 0 || row_idx[i] >= av.rows || col_idx[i] < 0 || col_idx[i] >= av.cols)
      throw std::out_of_range("gather_cells: index out of range");
    out.v[i] = av.at(row_idx[i], col_idx[i]);
  }
  AdNode* an = a.node_.get();
  const int in_rows = av.rows, in_cols = av.cols;
  return make_op(std::move(out), {a}, [an, row_idx, col_idx, in_rows, in_cols](AdNode& self) {
    Tensor g(in_rows, in_cols);
    for (size_t i = 0; i < row_idx.size(); ++i)
      g.at(row_idx[i], col_idx[i]) += self.grad.v[i];
    an->accumulate(g);
  });
}

Var slice_cols(const Var& a, int start, int len) {
  check_defined(a, "slice_cols");
  const Tensor& av = a.val();
  if (start < 0 || len < 0 || start + len > av.cols)
    throw std::out_of_range("slice_cols: range out of bounds");
  Tensor out(av.rows, len);
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < len; ++j) out.at(i, j) = av.at(i, start + j);
  AdNode* an = a.node_.get();
  const int in_cols = av.cols;
  return make_op(std::move(out), {a}, [an, start, len, in_cols](AdNode& self) {
    Tensor g(self.grad.rows, in_cols);
    for (int i = 0; i < self.grad.rows; ++i)
      for (int j = 0; j < len; ++j) g.at(i, start + j) = self.grad.at(i, j);
    an->accumulate(g);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  int rows = parts[0].val().rows;
  int total = 0;
  for (const Var& p : parts) {
    check_defined(p, "concat_cols");
    if (p.val().rows != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    total += p.val().cols;
  }
  Tensor out(rows, total);
  std::vector<int> offsets(parts.size());
  int off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    offsets[k] = off;
    const Tensor& pv = parts[k].val();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < pv.cols; ++j) out.at(i, off + j) = pv.at(i, j);
    off += pv.cols;
  }
  std::vector<Var> parents = parts;
  std::vector<int> widths(parts.size());
  for (size_t k = 0; k < parts.size(); ++k) widths[k] = parts[k].val().cols;
  std::vector<AdNode*> nodes;
  for (const Var& p : parts) nodes.push_back(p.node_.get());
  return make_op(std::move(out), std::move(parents), [nodes, offsets, widths](AdNode& self) {
    for (size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      Tensor g(self.grad.rows, widths[k]);
      for (int i = 0; i < self.grad.rows; ++i)
        for (int j = 0; j < widths[k]; ++j) g.at(i, j) = self.grad.at(i, offsets[k] + j);
      nodes[k]->accumulate(g);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
  check_defined(a, "sum_all");
  const Tensor& av = a.val();
  Tensor out(1, 1);
  double s = 0.0;
  for (double x : av.v) s += x;
  out.v[0] = s;
  AdNode* an = a.node_.get();
  const int r = av.rows, c = av.cols;
  return make_op(std::move(out), {a}, [an, r, c](AdNode& self) {
    an->accumulate(Tensor::full(r, c, self.grad.v[0]));
  });
}

Var mean_all(const Var& a) {
  check_defined(a, "mean_all");
  const size_t n = a.val().size();
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var mean_over_rows(const Var& a) {
  check_defined(a, "mean_over_rows");
  const Tensor& av = a.val();
  if (av.rows == 0) throw std::invalid_argument("mean_over_rows: no rows");
  Tensor out(1, av.cols);
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out.v[j] += av.at(i, j);
  for (int j = 0; j < av.cols; ++j) out.v[j] /= av.rows;
  AdNode* an = a.node_.get();
  const int r = av.rows, c = av.cols;
  return make_op(std::move(out), {a}, [an, r, c](AdNode& self) {
    Tensor g(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) g.at(i, j) = self.grad.v[j] / r;
    an->accumulate(g);
  });
}

Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

}  // namespace ditmoe
