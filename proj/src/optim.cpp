#include "cmcl/optim.hpp"

#include <cmath>

#include "cmcl/errors.hpp"

namespace cmcl {

void OptimizerSpec::validate(const std::string& field) const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError(field + ".lr", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ValidationError(field + ".weight_decay", "must be >= 0");
  if (kind == OptimizerKind::MomentumSgd && !(momentum >= 0.0 && momentum < 1.0)) {
    throw ValidationError(field + ".momentum", "must lie in [0, 1)");
  }
  if (kind == OptimizerKind::AdamW) {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError(field + ".beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError(field + ".beta2", "must lie in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError(field + ".eps", "must be > 0");
  }
}

void optimizer_step(const OptimizerSpec& spec, ParamState& state, Tensor& param,
                    const Tensor& grad, bool decay) {
  if (param.shape() != grad.shape() || state.first.shape() != param.shape() ||
      state.second.shape() != param.shape()) {
    throw DimensionError("optimizer_step: parameter " + shape_string(param.shape()) +
                         ", gradient " + shape_string(grad.shape()) + ", state " +
                         shape_string(state.first.shape()));
  }
  const double wd = decay ? spec.weight_decay : 0.0;
  const double lr = spec.lr;
  ++state.step;
  if (spec.kind == OptimizerKind::MomentumSgd) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      double& v = state.first[i];
      v = spec.momentum * v + grad[i];
      param[i] -= lr * (v + wd * param[i]);
    }
    return;
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(spec.beta1, t);
  const double c2 = 1.0 - std::pow(spec.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    double& m = state.first[i];
    double& v = state.second[i];
    m = spec.beta1 * m + (1.0 - spec.beta1) * grad[i];
    v = spec.beta2 * v + (1.0 - spec.beta2) * grad[i] * grad[i];
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    param[i] -= lr * (m_hat / (std::sqrt(v_hat) + spec.eps) + wd * param[i]);
  }
}

void Optimizer::step(std::size_t slot, Tensor& param, const Tensor& grad, bool decay) {
  auto& state = states_.at(slot);
  if (!state) state = ParamState::zeros_like(param);
  optimizer_step(spec_, *state, param, grad, decay);
}

}  // namespace cmcl
