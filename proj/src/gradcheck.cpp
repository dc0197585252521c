#include "malvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "malvit/error.hpp"
#include "malvit/rng.hpp"

namespace malvit {

GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(GradientTape<double>&)>& f, std::vector<Tensor<double>> inputs,
    const GradCheckOptions& options) {
  if (!(options.h > 0)) throw ContractError("finite difference step must be positive");
  if (!(options.min_scale > 0)) throw ContractError("relative error floor must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  auto evaluate = [&]() {
    GradientTape<double> tape(false);
    const double v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("function value is not finite during gradient check");
    return v;
  };

  {
    GradientTape<double> tape;
    auto loss = f(tape);
    if (!std::isfinite(loss.item())) throw NumericError("function value is not finite");
    tape.backward(loss);
  }

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    const auto analytic = t.grad_values();
    std::vector<std::size_t> coords;
    if (options.samples_per_tensor == 0 || options.samples_per_tensor >= t.numel()) {
      coords.resize(t.numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      auto perm = rng.permutation(t.numel());
      coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(options.samples_per_tensor));
    }
    for (auto i : coords) {
      const double orig = t.data()[i];
      t.data()[i] = orig + options.h;
      const double up = evaluate();
      t.data()[i] = orig - options.h;
      const double down = evaluate();
      t.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * options.h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.min_scale});
      const double rel = std::abs(a - numeric) / denom;
      if (denom == options.min_scale) ++result.below_scale;
      result.max_abs_error = std::max(result.max_abs_error, std::abs(a - numeric));
      if (rel > result.max_rel_error || result.coordinates == 0) {
        result.max_rel_error = rel;
        result.worst_tensor = ti;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace malvit
