#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "imim/training.hpp"

namespace imim {

/// Error measure: |analytic - numeric| / max(|numeric|, 1e-3). It is <= 1e-4
/// exactly when the gradient is within max(1e-4 relative, 1e-7 absolute).
double gradient_error(double analytic, double numeric);

struct GradcheckGroup {
  std::string name;  // parameter name
  std::size_t checked = 0;
  double max_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  double max_error = 0.0;
  bool passed(double tol = 1e-4) const { return max_error <= tol; }
};

/// Small configuration for end-to-end finite-difference checks:
/// d=8, depth 1, 2 heads, 8x8 rgb input, 4 px patches.
RunConfig tiny_run_config();

/// Central differences on every element of every trainable parameter, for a
/// batch of two random images with random plans. Randomized init keeps the
/// cross-attention path live.
GradcheckReport gradcheck_model(const RunConfig& config, std::uint64_t seed, double step = 1e-5);

}  // namespace imim
