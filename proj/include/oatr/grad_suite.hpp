#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace oatr {

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Finite-difference checks of every differentiable op on randomized shapes,
/// in double precision; one entry per op with its worst relative error.
std::vector<GradSuiteEntry> run_op_grad_suite(int trials, std::uint64_t seed);

/// Full objective (matching + tag + mask) on a two-pair batch through a
/// small double-precision dual encoder, checked against every parameter.
GradSuiteEntry run_objective_grad_check(std::uint64_t seed);

}  // namespace oatr
