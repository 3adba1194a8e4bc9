#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "im2tex/models.hpp"

// Finite-difference verification suite shared by the gradcheck command and
// the test binaries.

namespace im2tex::verify {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kArchTolerance = 1e-3;

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // leaf with the largest error, for model checks

  bool passed() const { return max_rel_error <= tolerance; }
};

// Every differentiable primitive on small random inputs, all coordinates.
std::vector<CheckResult> op_gradchecks(std::uint64_t seed);

// Masked cross-entropy of one synthetic sample through a full architecture
// with random parameters. Probes `coords_per_leaf` coordinates of every
// parameter tensor (0 = all).
CheckResult arch_gradcheck(models::Arch arch, models::Preset preset, std::uint64_t seed,
                           std::size_t coords_per_leaf = 4);

std::vector<CheckResult> arch_gradchecks(models::Preset preset, std::uint64_t seed,
                                         std::size_t coords_per_leaf = 4);

}  // namespace im2tex::verify
