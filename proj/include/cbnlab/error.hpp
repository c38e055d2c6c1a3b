#pragma once

#include <stdexcept>
#include <string>

namespace cbnlab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an op expects.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced by a forward or optimizer step.
struct NumericError : Error {
  using Error::Error;
};

// Malformed SCDS/checkpoint/config payloads.
struct FormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Misuse of the tape (double backward, non-scalar loss, ...).
struct TapeError : Error {
  using Error::Error;
};

}  // namespace cbnlab
