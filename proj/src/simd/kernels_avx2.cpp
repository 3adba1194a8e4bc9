#include "im2tex/simd/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define IM2TEX_HAVE_AVX2_BUILD 1
#endif

#include <cmath>

namespace im2tex::simd {

#if IM2TEX_HAVE_AVX2_BUILD
namespace {

#define IM2TEX_AVX2 __attribute__((target("avx2")))

// Each kernel processes four lanes at a time and finishes the tail with the
// same scalar expression the reference uses.

IM2TEX_AVX2 void matmul(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      const __m256d va = _mm256_set1_pd(av);
      const double* brow = b + t * n;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(brow + j));
        _mm256_storeu_pd(crow + j, _mm256_add_pd(_mm256_loadu_pd(crow + j), prod));
      }
      for (; j < n; ++j) crow[j] = crow[j] + av * brow[j];
    }
  }
}

IM2TEX_AVX2 void add(const double* x, const double* y, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

IM2TEX_AVX2 void mul(const double* x, const double* y, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

IM2TEX_AVX2 void scale(const double* x, double alpha, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

IM2TEX_AVX2 void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

IM2TEX_AVX2 void accumulate(const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] = y[i] + x[i];
}

IM2TEX_AVX2 void relu(const double* x, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vx = _mm256_loadu_pd(x + i);
    // x > 0 ? x : 0, which also maps -0.0 and NaN to +0.0 like the reference.
    const __m256d keep = _mm256_cmp_pd(vx, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(keep, vx));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

IM2TEX_AVX2 void relu_backward(const double* x, const double* g, double* gx, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d cur = _mm256_loadu_pd(gx + i);
    const __m256d sum = _mm256_add_pd(cur, _mm256_loadu_pd(g + i));
    _mm256_storeu_pd(gx + i, _mm256_blendv_pd(cur, sum, keep));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) gx[i] = gx[i] + g[i];
  }
}

IM2TEX_AVX2 void round_to_f32(double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m128 narrow = _mm256_cvtpd_ps(_mm256_loadu_pd(x + i));
    _mm256_storeu_pd(x + i, _mm256_cvtps_pd(narrow));
  }
  for (; i < n; ++i) x[i] = static_cast<double>(static_cast<float>(x[i]));
}

IM2TEX_AVX2 void adamw_update(double* param, const double* grad, double* m, double* v,
                              std::size_t n, const AdamParams& hp) {
  const double decay = hp.lr * hp.weight_decay;
  const double one_minus_b1 = 1.0 - hp.beta1;
  const double one_minus_b2 = 1.0 - hp.beta2;
  const __m256d v_decay = _mm256_set1_pd(decay);
  const __m256d v_b1 = _mm256_set1_pd(hp.beta1);
  const __m256d v_b2 = _mm256_set1_pd(hp.beta2);
  const __m256d v_1mb1 = _mm256_set1_pd(one_minus_b1);
  const __m256d v_1mb2 = _mm256_set1_pd(one_minus_b2);
  const __m256d v_bc1 = _mm256_set1_pd(hp.bias_correction1);
  const __m256d v_bc2 = _mm256_set1_pd(hp.bias_correction2);
  const __m256d v_lr = _mm256_set1_pd(hp.lr);
  const __m256d v_eps = _mm256_set1_pd(hp.eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d p0 = _mm256_loadu_pd(param + i);
    __m256d p = _mm256_sub_pd(p0, _mm256_mul_pd(v_decay, p0));
    const __m256d g = _mm256_loadu_pd(grad + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(v_b1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(v_1mb1, g));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(v_b2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(v_1mb2, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    const __m256d m_hat = _mm256_div_pd(mi, v_bc1);
    const __m256d v_hat = _mm256_div_pd(vi, v_bc2);
    const __m256d step = _mm256_div_pd(m_hat, _mm256_add_pd(_mm256_sqrt_pd(v_hat), v_eps));
    p = _mm256_sub_pd(p, _mm256_mul_pd(v_lr, step));
    _mm256_storeu_pd(param + i, p);
  }
  for (; i < n; ++i) {
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

const KernelTable* avx2_kernels() {
  static const bool supported = __builtin_cpu_supports("avx2");
  static const KernelTable table{Isa::avx2, matmul, add,  mul,           scale,        axpy,
                                 accumulate, relu,   relu_backward, round_to_f32, adamw_update};
  return supported ? &table : nullptr;
}

#else

const KernelTable* avx2_kernels() { return nullptr; }

#endif

}  // namespace im2tex::simd
