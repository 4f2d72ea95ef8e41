#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ldkl/autodiff.hpp"

namespace ldkl::ad {

using ScalarFn = std::function<Var(Tape&)>;

struct GradCheckOptions {
  /// Check at most this many coordinates per parameter, evenly strided; 0 means all.
  std::size_t max_coords_per_param = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_coordinate;
  std::size_t coordinates_checked = 0;
};

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Parameter*>& params, double h,
                                  const GradCheckOptions& opts = {});

}  // namespace ldkl::ad
