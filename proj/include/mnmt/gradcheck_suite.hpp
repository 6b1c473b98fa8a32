#pragma once

#include <string>
#include <vector>

namespace mnmt {

struct GradCheckCase {
  std::string op;
  double max_rel_error = 0;
  long cases = 0;
};

struct GradCheckResult {
  std::vector<GradCheckCase> per_op;
  double max_rel_error = 0;
  std::string to_text() const;
};

// Central-difference verification of every differentiable op and of full
// encoder / cross-attending decoder layers, `cases_per_op` random instances
// each, double precision.
GradCheckResult run_gradient_checks(long cases_per_op = 50, double eps = 1e-5, std::uint64_t seed = 20240901);

}  // namespace mnmt
