#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Tape records every operation of one evaluation. Leaves are either
// constants (never differentiated) or parameters. backward() walks the tape
// in reverse and returns gradients for every node; it does not mutate the
// tape, so calling it twice gives identical results.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmcl/tensor.hpp"

namespace cmcl {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor::Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Maps the upstream gradient of a node to the gradients of its parents.
/// `inputs` are the parent values, `output` the node's own value.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& upstream, std::span<const Tensor* const> inputs, const Tensor& output)>;

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  /// Gradient with respect to `v`; all-zero when `v` is unreachable from the loss.
  const Tensor& of(Var v) const { return grads_.at(v.id()); }

 private:
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op);

  /// Gradients of scalar `loss` with respect to every node.
  /// Throws ContractError when `loss` is not single-valued.
  Gradients backward(Var loss) const;

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "leaf";
  };
  std::vector<Node> nodes_;
};

/// Scales the backward rule of every node named `op` by (1 + relative_error)
/// on the current thread while alive. Used as a negative control for the
/// gradient checker.
class ScopedGradientFault {
 public:
  ScopedGradientFault(std::string op, double relative_error = 1e-2);
  ~ScopedGradientFault();
  ScopedGradientFault(const ScopedGradientFault&) = delete;
  ScopedGradientFault& operator=(const ScopedGradientFault&) = delete;

 private:
  std::string previous_op_;
  double previous_error_;
};

// ---------------------------------------------------------------------------
// Operations. Shapes follow the names: [m x k] etc.
// ---------------------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n]
Var matmul(Var a, Var b);
/// [m x n] -> [n x m]
Var transpose(Var a);
/// Elementwise sum of equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
/// [b x n] + [n] broadcast over rows.
Var add_row_bias(Var x, Var bias);
/// max(x, 0); subgradient 0 at 0.
Var relu(Var x);
/// Row-wise log-softmax of [b x K], max-subtracted.
Var log_softmax(Var logits);
/// Column means of [b x d] -> [d].
Var batch_mean(Var z);
/// Sample covariance of [b x d] -> [d x d], divisor b - 1.
Var batch_covariance(Var z);
/// Sum of squared elementwise differences -> scalar.
Var sq_frobenius_dist(Var a, Var b);
/// Sum of all elements -> scalar.
Var sum(Var x);
/// sum_r x[r, labels[r]] for [b x K] -> scalar.
Var pick_sum(Var x, std::vector<int> labels);
/// Elements [offset, offset + prod(shape)) of `flat`, viewed with `shape`.
Var slice(Var flat, std::size_t offset, Tensor::Shape shape);

}  // namespace cmcl
