#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "sdopf/autodiff.hpp"

namespace sdopf::ad {

struct GradCheckResult {
  double max_rel_err = 0.0;
  long coords_checked = 0;
  std::string worst_param;
};

/// Compares reverse-mode gradients of a rebuildable scalar loss against
/// central finite differences over every coordinate of the given parameters.
/// Relative error uses a floor of 1e-3 in the denominator so near-zero
/// gradients are compared absolutely.
GradCheckResult gradcheck(const std::function<Value()>& build_loss,
                          const std::vector<std::pair<std::string, Value>>& params,
                          double h = 1e-5);

struct SuiteResult {
  double worst = 0.0;
  std::string worst_case;
  long cases = 0;
  bool passed = false;
  double seconds = 0.0;
};

/// Finite-difference sweep over every primitive op and the three network
/// forward passes, `instances` random instances each.
SuiteResult run_gradcheck_suite(int instances, std::uint64_t seed, double threshold,
                                std::ostream* log);

}  // namespace sdopf::ad
