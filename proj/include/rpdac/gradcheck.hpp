#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpdac/tensor.hpp"

namespace rpdac {

struct GradCheckRow {
  std::string op;
  std::string input;
  GradCheckResult result;
  double tolerance = 0.0;

  bool passed() const { return result.passes(tolerance); }
};

inline constexpr double kSingleOpTolerance = 1e-6;
inline constexpr double kComposedTolerance = 1e-4;

/// Finite-difference checks of every differentiable op (w.r.t. each input)
/// and of the composed training losses, on inputs drawn from `seed`.
std::vector<GradCheckRow> runGradcheckSuite(std::uint64_t seed);

}  // namespace rpdac
