#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "abm/num/autograd.hpp"

namespace abm::num {

template <typename Real>
struct NamedParameter {
  std::string name;
  Var<Real> var;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled: p -= lr_t * weight_decay * p
  double lr_decay = 0.0;      // lr_t = lr / (1 + t * lr_decay)
};

template <typename Real>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<Tensor<Real>> first_moment;
  std::vector<Tensor<Real>> second_moment;

  double effective_learning_rate() const {
    return config.learning_rate / (1.0 + static_cast<double>(step) * config.lr_decay);
  }
};

// One bias-corrected Adam update from the parameters' accumulated gradients.
// Moments are created on the first call; later calls must pass the same
// parameters in the same order. Throws ErrorCode::numeric naming the first
// parameter whose gradient is not finite, before anything is modified.
template <typename Real>
void adam_step(std::span<const NamedParameter<Real>> params, AdamState<Real>& state);

}  // namespace abm::num
