// Minimal reverse-mode automatic differentiation over 2-D tensors.
//
// A Var is a shared handle to a graph node holding a value and, after
// backward(), an accumulated gradient. Ops record their parents and a
// closure that pushes gradients backwards. Graph recording can be switched
// off (NoGradGuard) for inference, in which case ops only compute values.
//
// The op set is exactly what the transformer needs: matmul with transpose
// flags, elementwise arithmetic, row/column broadcasts, softmax, layernorm,
// row gather/scatter, column slice/concat, reductions and a handful of
// scalar nonlinearities. Every op's backward is checked against central
// finite differences in the test suite.

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ditmoe/tensor.hpp"

namespace ditmoe {

struct AdNode {
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<AdNode>> parents;
  std::function<void(AdNode&)> backfn;  // distributes this->grad to parents

  void accumulate(const Tensor& g);
};

class Var {
 public:
  Var() = default;

  static Var leaf(Tensor value, bool requires_grad = true);
  static Var constant(Tensor value);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& val() const;
  const Tensor& grad() const;  // valid on leaves after backward()
  bool requires_grad() const { return node_ && node_->requires_grad; }
  int rows() const { return val().rows; }
  int cols() const { return val().cols; }
  double scalar() const;  // value of a 1x1 Var

  std::shared_ptr<AdNode> node_;  // shared handle; treated as internal
};

bool grad_enabled();

// RAII switch: while alive, newly created ops do not record the graph.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Runs reverse accumulation from a scalar (1x1) loss.
void backward(const Var& loss);

// ----- elementwise / scalar -----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var vexp(const Var& a);
Var vlog(const Var& a);
Var vsqrt(const Var& a);
Var verf(const Var& a);
Var vgelu(const Var& a);
Var vsilu(const Var& a);
Var vclamp(const Var& a, double lo, double hi);
Var detach(const Var& a);

// ----- broadcasts: a is [R,C]; row vector [1,C], column vector [R,1] -----
Var add_rowvec(const Var& a, const Var& rowv);
Var mul_rowvec(const Var& a, const Var& rowv);
Var mul_colvec(const Var& a, const Var& colv);

// ----- linear algebra -----
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var softmax_rows(const Var& a);
Var layernorm_rows(const Var& a, double eps);

// ----- indexing / layout -----
Var gather_rows(const Var& a, const std::vector<int>& row_indices);
// Builds [out_rows, C] from zero, adding rows[i] into row row_indices[i]
// (duplicates accumulate).
Var scatter_rows(const std::vector<int>& row_indices, const Var& rows, int out_rows);
// Picks single cells (row_idx[i], col_idx[i]) into an [m,1] column.
Var gather_cells(const Var& a, const std::vector<int>& row_idx, const std::vector<int>& col_idx);
Var slice_cols(const Var& a, int start, int len);
Var concat_cols(const std::vector<Var>& parts);

// ----- reductions -----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mean_over_rows(const Var& a);  // [R,C] -> [1,C]

// Convenience: mean_all(square(sub(a, b)))
Var mse(const Var& a, const Var& b);

}  // namespace ditmoe
