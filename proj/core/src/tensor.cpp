#include "ditmoe/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ditmoe {

Tensor::Tensor(int r, int c) : rows(r), cols(c) {
  if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative dimension");
  v.assign(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0);
}

Tensor Tensor::full(int r, int c, double value) {
  Tensor t(r, c);
  for (double& x : t.v) x = value;
  return t;
}

Tensor Tensor::row(std::initializer_list<double> values) {
  Tensor t(1, static_cast<int>(values.size()));
  size_t i = 0;
  for (double x : values) t.v[i++] = x;
  return t;
}

Tensor Tensor::row(const std::vector<double>& values) {
  Tensor t(1, static_cast<int>(values.size()));
  t.v = values;
  return t;
}

namespace {

// Core kernel: C (+)= A * B with A [m,k], B [k,n], ikj order so the inner
// loop runs over contiguous memory in both B and C.
void mm_kernel(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double s = arow[p];
      if (s == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

Tensor transposed(const Tensor& t) {
  Tensor out(t.cols, t.rows);
  for (int i = 0; i < t.rows; ++i)
    for (int j = 0; j < t.cols; ++j) out.at(j, i) = t.at(i, j);
  return out;
}

}  // namespace

void matmul_into(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b,
                 Tensor& out, bool accumulate) {
  Tensor atmp, btmp;
  const Tensor* pa = &a;
  const Tensor* pb = &b;
  if (transpose_a) {
    atmp = transposed(a);
    pa = &atmp;
  }
  if (transpose_b) {
    btmp = transposed(b);
    pb = &btmp;
  }
  const int m = pa->rows, k = pa->cols, k2 = pb->rows, n = pb->cols;
  if (k != k2) throw std::invalid_argument("matmul: inner dimensions differ");
  if (!accumulate) {
    out = Tensor(m, n);
  } else if (out.rows != m || out.cols != n) {
    throw std::invalid_argument("matmul: accumulate target has wrong shape");
  }
  mm_kernel(pa->v.data(), pb->v.data(), out.v.data(), m, k, n);
}

Tensor matmul_plain(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b) {
  Tensor out;
  matmul_into(a, transpose_a, b, transpose_b, out, false);
  return out;
}

double gelu_erf(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_erf_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

double silu_scalar(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return x * s;
}

double silu_scalar_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

Rng::Rng(uint64_t seed) : engine_(seed) {}

double Rng::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
  return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
}

uint64_t Rng::next_u64() { return engine_(); }

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0);
  if (has_spare_) {
    os << ' ';
    os.precision(17);
    os << std::hexfloat << spare_;
  }
  return os.str();
}

void Rng::deserialize(const std::string& text) {
  std::istringstream is(text);
  is >> engine_;
  int flag = 0;
  is >> flag;
  if (is.fail()) throw std::runtime_error("Rng::deserialize: malformed state string");
  has_spare_ = flag != 0;
  spare_ = 0.0;
  if (has_spare_) {
    std::string tok;
    is >> tok;
    if (tok.empty()) throw std::runtime_error("Rng::deserialize: missing spare value");
    spare_ = std::strtod(tok.c_str(), nullptr);
  }
}

bool Rng::operator==(const Rng& o) const {
  return engine_ == o.engine_ && has_spare_ == o.has_spare_ && spare_ == o.spare_;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t root, uint64_t stream) {
  // Documented sub-seed scheme: scramble (root, stream counter) through
  // SplitMix64 twice so nearby roots/streams land far apart.
  return splitmix64(splitmix64(root) ^ splitmix64(stream + 0x51ED270B9F112239ull));
}

}  // namespace ditmoe
