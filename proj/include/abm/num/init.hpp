#pragma once

#include "abm/num/random.hpp"
#include "abm/num/tensor.hpp"

namespace abm::num {

// Fan sizes follow the usual convention: [out, in, k...] -> fan_in = in * prod(k),
// fan_out = out * prod(k). Rank-1 shapes use the single extent for both.
struct Fans {
  double fan_in;
  double fan_out;
};
Fans compute_fans(const Shape& shape);

double xavier_bound(const Shape& shape);

// Uniform in [-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))].
template <typename Real>
Tensor<Real> xavier_uniform(const Shape& shape, Rng& rng);

}  // namespace abm::num
