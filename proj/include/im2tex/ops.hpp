#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "im2tex/tensor.hpp"

// Differentiable tensor operations. Each op records a node on the active tape
// when at least one input requires a gradient; otherwise it is a plain value
// computation. Broadcasting is limited to add_bias over the last axis.

namespace im2tex {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x[..., d] + bias[d]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
// tanh approximation
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// Numerically stable (max-subtracted) softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

// Row softmax of scores[lq,lk] restricted to entries with mask != 0
// (row-major lq*lk). Masked entries come out as exactly 0. Throws
// ContractError when a row has no attendable entry.
Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> mask);

// Normalises each slice along the last axis to zero mean and unit population
// variance, then applies gain and shift.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5);

// Gathers rows of table[V,d]; backward scatters additively.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Same-padded (zero fill) 3x3 cross-correlation over an HWC image.
// kernels[3,3,c_in,c_out], bias[c_out]. Output extent is (h-1)/stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              std::size_t stride = 1);

// 2x2 window, stride 2, floor semantics. The gradient goes to the first
// maximal element of each window in row-major order.
Tensor maxpool2d(const Tensor& input);

Tensor reshape(const Tensor& x, Shape shape);
// Rank-2 transpose.
Tensor transpose(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [n,d] -> [d], average over rows.
Tensor mean_rows(const Tensor& x);

// sum_i weights[i] * -log softmax(logits[i])[targets[i]] for logits[n,V].
Tensor nll_loss(const Tensor& logits, std::span<const int> targets,
                std::span<const double> weights);

}  // namespace im2tex
