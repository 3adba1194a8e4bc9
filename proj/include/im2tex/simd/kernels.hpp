#pragma once

#include <cstddef>
#include <string_view>

// Data-parallel inner loops used by the tensor engine. Every kernel exists as
// a scalar reference and, where the CPU allows it, an AVX2 variant chosen at
// runtime. The variants only vectorise across independent output elements and
// never reassociate a sum, so their results are bit-identical to the scalar
// reference.

namespace im2tex::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

struct AdamParams {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  Isa isa;

  // c[m,n] = a[m,k] * b[k,n], each c[i,j] summed in increasing k order.
  void (*matmul)(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n);
  // out = x + y
  void (*add)(const double* x, const double* y, double* out, std::size_t n);
  // out = x * y
  void (*mul)(const double* x, const double* y, double* out, std::size_t n);
  // out = alpha * x
  void (*scale)(const double* x, double alpha, double* out, std::size_t n);
  // y += alpha * x (separate multiply and add)
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y += x
  void (*accumulate)(const double* x, double* y, std::size_t n);
  // out = max(x, 0)
  void (*relu)(const double* x, double* out, std::size_t n);
  // gx += g where x > 0
  void (*relu_backward)(const double* x, const double* g, double* gx, std::size_t n);
  // In-place round-trip through binary32.
  void (*round_to_f32)(double* x, std::size_t n);
  // Decoupled weight decay followed by the bias-corrected Adam delta.
  void (*adamw_update)(double* param, const double* grad, double* m, double* v,
                       std::size_t n, const AdamParams& hp);
};

const KernelTable& scalar_kernels();

// nullptr when the running CPU (or the build target) lacks AVX2.
const KernelTable* avx2_kernels();

// Best table for this CPU; resolved once.
const KernelTable& kernels();

// Overrides the dispatch choice (tests and benchmarks). Falls back to scalar
// when the requested ISA is unavailable and returns the ISA now active.
Isa force_isa(Isa isa);

}  // namespace im2tex::simd
