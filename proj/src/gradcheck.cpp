#include "im2tex/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "im2tex/errors.hpp"
#include "im2tex/rng.hpp"

namespace im2tex {
namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-4 && eps <= 1e-2)) {
    throw ContractError("grad_check: eps " + std::to_string(eps) + " outside [1e-4, 1e-2]");
  }
}

double evaluate(const std::function<Tensor()>& loss) {
  TapeScope no_tape(nullptr);
  return loss().item();
}

}  // namespace

std::vector<GradCheckResult> grad_check_leaves(const std::function<Tensor()>& loss,
                                               std::span<Tensor> leaves, double eps,
                                               std::size_t coords_per_leaf, std::uint64_t seed) {
  check_eps(eps);
  PrecisionScope f64(Precision::f64);

  std::vector<bool> saved_flags;
  for (Tensor& leaf : leaves) {
    saved_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(&tape);
    tape.backward(loss());
  }
  for (Tensor& leaf : leaves) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());

  Rng rng(seed);
  std::vector<GradCheckResult> results;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    std::vector<std::size_t> coords(leaf.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords_per_leaf != 0 && coords_per_leaf < coords.size()) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(coords_per_leaf);
      std::sort(coords.begin(), coords.end());
    }
    GradCheckResult r;
    auto values = leaf.mutable_values();
    for (std::size_t i : coords) {
      const double original = values[i];
      values[i] = original + eps;
      const double plus = evaluate(loss);
      values[i] = original - eps;
      const double minus = evaluate(loss);
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = std::abs(analytic[li][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > r.max_rel_error || r.coordinates == 0) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        if (err >= r.max_rel_error) r.worst_index = i;
      }
      ++r.coordinates;
    }
    results.push_back(r);
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    leaves[li].set_requires_grad(saved_flags[li]);
  }
  return results;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps) {
  Tensor leaf = x.clone();
  std::vector<Tensor> leaves{leaf};
  return grad_check_leaves([&] { return f(leaf); }, leaves, eps, 0, 0).front();
}

}  // namespace im2tex
