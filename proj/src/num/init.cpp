#include "abm/num/init.hpp"

#include <cmath>

namespace abm::num {

Fans compute_fans(const Shape& shape) {
  if (shape.empty()) fail(ErrorCode::shape, "xavier init needs a non-empty shape");
  if (shape.size() == 1) {
    const auto d = static_cast<double>(shape[0]);
    return {d, d};
  }
  double receptive = 1.0;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
  return {static_cast<double>(shape[1]) * receptive, static_cast<double>(shape[0]) * receptive};
}

double xavier_bound(const Shape& shape) {
  const Fans f = compute_fans(shape);
  return std::sqrt(6.0 / (f.fan_in + f.fan_out));
}

template <typename Real>
Tensor<Real> xavier_uniform(const Shape& shape, Rng& rng) {
  const double bound = xavier_bound(shape);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Real> out(shape);
  for (auto& v : out.data()) v = static_cast<Real>(dist(rng));
  return out;
}

template Tensor<float> xavier_uniform(const Shape&, Rng&);
template Tensor<double> xavier_uniform(const Shape&, Rng&);

}  // namespace abm::num
