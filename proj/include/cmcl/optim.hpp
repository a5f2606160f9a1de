#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cmcl/tensor.hpp"

namespace cmcl {

enum class OptimizerKind { MomentumSgd, AdamW };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::MomentumSgd;
  double lr = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;

  static OptimizerSpec sgd(double lr, double momentum = 0.0, double weight_decay = 0.0) {
    return {OptimizerKind::MomentumSgd, lr, momentum, 0.9, 0.999, 1e-8, weight_decay};
  }
  static OptimizerSpec adamw(double lr, double weight_decay = 0.0) {
    return {OptimizerKind::AdamW, lr, 0.0, 0.9, 0.999, 1e-8, weight_decay};
  }
  /// Throws ValidationError prefixed with `field`.
  void validate(const std::string& field) const;
};

/// Auxiliary buffers of one parameter: velocity (SGD) or first/second
/// moments plus step count (AdamW).
struct ParamState {
  Tensor first;
  Tensor second;
  std::uint64_t step = 0;

  static ParamState zeros_like(const Tensor& param) {
    return {Tensor::zeros_like(param), Tensor::zeros_like(param), 0};
  }
};

/// One update of `param` in place.
///   SGD:   v <- mu v + g;  p <- p - lr (v + wd p)
///   AdamW: m, v moment updates with bias correction;
///          p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
/// Weight decay is applied only when `decay` is set.
void optimizer_step(const OptimizerSpec& spec, ParamState& state, Tensor& param,
                    const Tensor& grad, bool decay);

/// Per-slot optimizer state, created lazily on first update of each slot.
class Optimizer {
 public:
  Optimizer(OptimizerSpec spec, std::size_t slots) : spec_(spec), states_(slots) {}

  void step(std::size_t slot, Tensor& param, const Tensor& grad, bool decay);

  const OptimizerSpec& spec() const { return spec_; }
  const std::optional<ParamState>& state(std::size_t slot) const { return states_.at(slot); }

 private:
  OptimizerSpec spec_;
  std::vector<std::optional<ParamState>> states_;
};

}  // namespace cmcl
