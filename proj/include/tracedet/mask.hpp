#pragma once

#include "tracedet/errors.hpp"
#include "tracedet/tensor.hpp"

namespace tracedet {

// Clamp keeping mask probabilities strictly inside (0,1) so logs stay finite.
inline constexpr real_t kProbClamp = 1e-6;

// Per-step selection probabilities, shape [T, B], entries in
// [kProbClamp, 1 - kProbClamp].
struct MaskProbs {
  Tensor values;

  std::size_t steps() const { return values.dim(0); }
  std::size_t batch() const { return values.dim(1); }

  void validate() const {
    if (values.rank() != 2) throw shape_error("MaskProbs: expected rank-2 [T,B] tensor");
    for (real_t p : values.values())
      if (!(p >= kProbClamp && p <= 1.0 - kProbClamp))
        throw validation_error("MaskProbs: entry outside clamped (0,1)");
  }
};

// Sampled or thresholded temporal mask, shape [T, B]. Entries are {0,1} in
// hard/deterministic modes and may be relaxed values in (0,1) in soft mode.
struct HardMask {
  Tensor values;

  std::size_t steps() const { return values.dim(0); }
  std::size_t batch() const { return values.dim(1); }
};

}  // namespace tracedet
