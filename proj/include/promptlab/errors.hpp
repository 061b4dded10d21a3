#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace promptlab {

// Bad user-facing configuration: invalid dimensions, unknown options,
// out-of-range hyperparameters.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent data: corrupt task files, digest mismatches,
// empty evaluation sets, label/instance bookkeeping violations.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Degenerate numeric input: zero-norm vectors, NaN/Inf logits,
// probability vectors that do not sum to one.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Optimization diverged. Carries the step index and the learning rate in
// effect when the non-finite loss appeared.
struct TrainAbort : std::runtime_error {
  TrainAbort(std::size_t step, double learning_rate);
  std::size_t step;
  double learning_rate;
};

}  // namespace promptlab
