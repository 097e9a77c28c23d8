#include "abm/num/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "abm/num/random.hpp"

namespace abm::num {

namespace {

struct Probe {
  double value;
  std::uint64_t digest;
};

Probe evaluate(const std::function<Var<double>()>& loss) {
  DecisionTrace trace;
  const double value = loss().item();
  return {value, trace.digest()};
}

}  // namespace

GradCheckReport grad_check(const std::function<Var<double>()>& loss,
                           std::span<const NamedParameter<double>> params,
                           const GradCheckOptions& options) {
  for (const auto& p : params) {
    Var<double> v = p.var;
    v.mutable_value().ensure_grad();
    v.zero_grad();
  }
  Probe base{};
  {
    DecisionTrace trace;
    Var<double> out = loss();
    base = {out.item(), trace.digest()};
    out.backward();
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].var.value().size(); ++i) coords.emplace_back(k, i);
  }
  Rng rng(options.seed);
  std::shuffle(coords.begin(), coords.end(), rng);

  GradCheckReport report;
  const double h = options.step;
  for (const auto& [k, i] : coords) {
    if (report.checked >= options.coordinates) break;
    Var<double> var = params[k].var;
    double& slot = var.mutable_value()[i];
    const double original = slot;
    slot = original + h;
    const Probe plus = evaluate(loss);
    slot = original - h;
    const Probe minus = evaluate(loss);
    slot = original;
    if (plus.digest != base.digest || minus.digest != base.digest) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * h);
    const double analytic = var.grad()[i];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), options.floor});
    report.max_relative_error =
        std::max(report.max_relative_error, std::abs(numeric - analytic) / denom);
    ++report.checked;
  }
  return report;
}

}  // namespace abm::num
