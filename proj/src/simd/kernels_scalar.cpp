#include "im2tex/simd/kernels.hpp"

#include <cmath>

namespace im2tex::simd {
namespace {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = crow[j] + av * brow[j];
    }
  }
}

void add(const double* x, const double* y, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void mul(const double* x, const double* y, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void scale(const double* x, double alpha, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void accumulate(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + x[i];
}

void relu(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* g, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) gx[i] = gx[i] + g[i];
  }
}

void round_to_f32(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(static_cast<float>(x[i]));
}

void adamw_update(double* param, const double* grad, double* m, double* v, std::size_t n,
                  const AdamParams& hp) {
  const double decay = hp.lr * hp.weight_decay;
  const double one_minus_b1 = 1.0 - hp.beta1;
  const double one_minus_b2 = 1.0 - hp.beta2;
  for (std::size_t i = 0; i < n; ++i) {
    double p = param[i] - decay * param[i];
    const double g = grad[i];
    m[i] = hp.beta1 * m[i] + one_minus_b1 * g;
    v[i] = hp.beta2 * v[i] + one_minus_b2 * (g * g);
    const double m_hat = m[i] / hp.bias_correction1;
    const double v_hat = v[i] / hp.bias_correction2;
    p = p - hp.lr * (m_hat / (std::sqrt(v_hat) + hp.eps));
    param[i] = p;
  }
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::scalar, matmul, add,  mul,           scale,        axpy,
                                 accumulate,  relu,   relu_backward, round_to_f32, adamw_update};
  return table;
}

}  // namespace im2tex::simd
