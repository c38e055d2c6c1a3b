#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cbnlab {

struct GradSuiteEntry {
  std::string op;
  std::size_t trials = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

// Finite-difference check of every op, the norm layers, the auxiliary net
// and a small CBN model, each on `trials` random draws.
std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed,
                                           std::size_t trials,
                                           double tolerance = 1e-4);

}  // namespace cbnlab
