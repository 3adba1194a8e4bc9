#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "im2tex/tensor.hpp"

namespace im2tex {

struct GradCheckResult {
  // max over probed coordinates of |autodiff - central| / max(1, |central|)
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares the reverse-mode gradient of a scalar function against central
// differences, evaluating everything in 64-bit precision. eps must lie in
// [1e-4, 1e-2].
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-3);

// Multi-leaf variant for models: `loss` reads the leaves it closes over, which
// are perturbed in place and restored. Probes at most `coords_per_leaf`
// coordinates per leaf (0 = all), chosen by `seed`. One result per leaf.
std::vector<GradCheckResult> grad_check_leaves(const std::function<Tensor()>& loss,
                                               std::span<Tensor> leaves, double eps,
                                               std::size_t coords_per_leaf, std::uint64_t seed);

}  // namespace im2tex
