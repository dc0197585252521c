#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "malvit/tensor.hpp"

namespace malvit {

struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Smallest denominator of the relative error. Central differences carry a
  /// roundoff of about eps * |f| / h, so gradients that are exactly zero (such
  /// as the key bias under softmax) need a floor well above that noise.
  double min_scale = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t below_scale = 0;  // coordinates with |a| and |n| under min_scale
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the tape gradient of a scalar function against central finite
/// differences. `f` builds the loss from `inputs` on the tape it is given; it
/// is re-evaluated on a non-recording tape for every perturbed coordinate.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, min_scale).
GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(GradientTape<double>&)>& f,
    std::vector<Tensor<double>> inputs, const GradCheckOptions& options = {});

}  // namespace malvit
