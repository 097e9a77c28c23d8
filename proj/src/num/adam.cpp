#include "abm/num/adam.hpp"

#include <cmath>

namespace abm::num {

template <typename Real>
void adam_step(std::span<const NamedParameter<Real>> params, AdamState<Real>& state) {
  if (state.names.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.names.push_back(p.name);
      state.first_moment.emplace_back(p.var.shape());
      state.second_moment.emplace_back(p.var.shape());
    }
  }
  if (state.names.size() != params.size()) {
    fail(ErrorCode::state, "adam_step parameter count changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (p.name != state.names[k] || state.first_moment[k].shape() != p.var.shape()) {
      fail(ErrorCode::state, "adam_step parameter '" + p.name + "' does not match optimizer state");
    }
    if (!p.var.value().has_grad()) continue;
    for (Real g : p.var.grad()) {
      if (!std::isfinite(g)) {
        fail(ErrorCode::numeric, "non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }

  const AdamConfig& c = state.config;
  const double lr = state.effective_learning_rate();
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Var<Real> var = params[k].var;
    Tensor<Real>& value = var.mutable_value();
    if (!value.has_grad()) continue;
    const auto grad = value.grad();
    auto m = state.first_moment[k].data();
    auto v = state.second_moment[k].data();
    auto w = value.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grad[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = lr * (mi / correction1) / (std::sqrt(vi / correction2) + c.epsilon);
      w[i] = static_cast<Real>(w[i] - update - lr * c.weight_decay * w[i]);
    }
  }
}

template void adam_step(std::span<const NamedParameter<float>>, AdamState<float>&);
template void adam_step(std::span<const NamedParameter<double>>, AdamState<double>&);

}  // namespace abm::num
