#pragma once

#include <stdexcept>
#include <string>

namespace tracedet {

// Base class for all library errors.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A value or configuration violates a documented invariant.
struct validation_error : error {
  using error::error;
};

// A file could not be parsed; the message carries the line number.
struct parse_error : error {
  using error::error;
};

// Filesystem-level failure; the message carries the path.
struct io_error : error {
  using error::error;
};

// Tensor shapes are incompatible for the requested operation.
struct shape_error : error {
  using error::error;
};

// A non-finite value was produced where the computation requires finiteness.
struct numerical_error : error {
  using error::error;
};

// A metric is undefined for the given inputs (e.g. single-class AUROC).
struct undefined_metric_error : error {
  using error::error;
};

// An on-disk artifact has the wrong format version or is inconsistent.
struct artifact_error : error {
  using error::error;
};

}  // namespace tracedet
