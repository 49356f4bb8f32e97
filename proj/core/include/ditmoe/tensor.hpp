// Dense row-major 2-D tensor plus the deterministic RNG used across the
// library. Everything numerical downstream (autodiff, model, trainer) is
// built from these two pieces.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace ditmoe {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;  // row-major, rows * cols entries

  Tensor() = default;
  Tensor(int r, int c);

  static Tensor full(int r, int c, double value);
  static Tensor row(std::initializer_list<double> values);
  static Tensor row(const std::vector<double>& values);

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

// out = op(a) * op(b), or += when accumulate is set. Shapes are checked.
void matmul_into(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b,
                 Tensor& out, bool accumulate);
Tensor matmul_plain(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b);

// Exact-erf GELU and SiLU with their derivatives.
double gelu_erf(double x);
double gelu_erf_grad(double x);
double silu_scalar(double x);
double silu_scalar_grad(double x);

// Deterministic random stream: mt19937_64 plus an explicit Box-Muller cache,
// so the full state (including the cached spare normal) serializes exactly.
// std::normal_distribution is avoided on purpose: its draw sequence is
// implementation-defined and its internal state is awkward to checkpoint.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);

  double uniform();                // [0, 1)
  double normal();                 // standard normal, Box-Muller pair cache
  int64_t uniform_int(int64_t n);  // [0, n), n > 0
  uint64_t next_u64();

  std::string serialize() const;
  void deserialize(const std::string& text);

  bool operator==(const Rng& o) const;

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// SplitMix64 scramble; sub-stream seeds are derive_seed(root, stream_index).
uint64_t splitmix64(uint64_t x);
uint64_t derive_seed(uint64_t root, uint64_t stream);

}  // namespace ditmoe
