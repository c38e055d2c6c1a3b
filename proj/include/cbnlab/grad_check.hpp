#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cbnlab/conditioning.hpp"
#include "cbnlab/tape.hpp"

namespace cbnlab {

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  bool all_pass() const;
  double max_error() const;
};

// Records a scalar loss on the tape; parameters must be bound with
// Tape::param so their gradients land in Tensor::grad().
using LossFn = std::function<Var(Tape&)>;

// Compares backward() against central differences for every element of
// every parameter. Relative error is |a - n| / max(|a|, |n|, abs_floor).
// Throws NumericError if two forward passes disagree.
GradCheckReport grad_check(const LossFn& loss_fn,
                           const std::vector<NamedTensor>& params,
                           double tolerance, double step = 1e-5,
                           double abs_floor = 1e-6);

}  // namespace cbnlab
