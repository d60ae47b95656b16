#pragma once

#include <functional>
#include <vector>

#include "otgmm/linalg.hpp"

namespace otgmm {

using Objective = std::function<double(const Vector&)>;

struct NelderMeadOptions {
  double initial_step = 0.1;  // times (1 + |coordinate|)
  double tolerance = 1e-8;    // simplex diameter relative to 1 + ||best||
  int max_evals = 2000;
};

struct OptimResult {
  Vector x;
  double value = 0;
  int evaluations = 0;
  bool converged = false;
  int start_index = 0;  // which start produced the result
};

/// Nelder-Mead with standard coefficients (1, 2, 0.5, 0.5). Non-finite
/// objective values are treated as +inf.
OptimResult nelder_mead(const Objective& f, const Vector& start, const NelderMeadOptions& opts = {});

/// Runs nelder_mead from every start. The lowest value wins; ties (within
/// 1e-14 relative) go to the earlier start.
OptimResult multistart_nelder_mead(const Objective& f, const std::vector<Vector>& starts,
                                   const NelderMeadOptions& opts = {});

/// Deterministic Gaussian perturbations of `center`, scaled by
/// scale * (1 + |center_k|).
std::vector<Vector> perturbed_starts(const Vector& center, int count, double scale,
                                     unsigned long long seed);

}  // namespace otgmm
