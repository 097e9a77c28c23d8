#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "abm/num/adam.hpp"

namespace abm::num {

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coordinates = 50;
  std::uint64_t seed = 0;
  // Denominator floor of the relative error, so coordinates whose true
  // gradient is ~0 are compared in absolute terms.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-step perturbation changed a piecewise decision
  // (ReLU mask, pooling argmax, selected alignment entry).
  std::size_t skipped_kinks = 0;
};

// Compares reverse-mode gradients of `loss` against central differences
// (f(x+h) - f(x-h)) / 2h on a random subset of parameter coordinates.
// `loss` must be deterministic in the parameter values.
GradCheckReport grad_check(const std::function<Var<double>()>& loss,
                           std::span<const NamedParameter<double>> params,
                           const GradCheckOptions& options = {});

}  // namespace abm::num
