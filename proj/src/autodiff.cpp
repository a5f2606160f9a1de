#include "cmcl/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "cmcl/errors.hpp"

namespace cmcl {

namespace {

thread_local std::string g_fault_op;
thread_local double g_fault_error = 0.0;

Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* tape = vars.begin()->tape();
  for (const Var& v : vars) {
    if (v.tape() == nullptr || v.tape() != tape) {
      throw ContractError("operands live on different tapes");
    }
  }
  return *tape;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

Tensor transpose_values(const Tensor& a) {
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, "parameter"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op) {
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.backward = std::move(backward);
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractError(std::string(op) + ": operand from another tape");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape() != this) throw ContractError("backward: loss from another tape");
  if (nodes_.at(loss.id()).value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_string(nodes_[loss.id()].value.shape()));
  }
  std::vector<Tensor> grads;
  grads.reserve(nodes_.size());
  for (const Node& n : nodes_) grads.push_back(Tensor::zeros_like(n.value));
  grads[loss.id()].storage().assign(1, 1.0);

  // Nodes are appended after their parents, so reverse index order is a
  // valid reverse topological order.
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.requires_grad || !node.backward) continue;
    std::vector<const Tensor*> inputs;
    inputs.reserve(node.parents.size());
    for (std::size_t p : node.parents) inputs.push_back(&nodes_[p].value);
    std::vector<Tensor> parent_grads = node.backward(grads[id], inputs, node.value);
    if (!g_fault_op.empty() && g_fault_op == node.op) {
      for (Tensor& g : parent_grads) {
        for (double& v : g.storage()) v *= 1.0 + g_fault_error;
      }
    }
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::size_t p = node.parents[k];
      if (!nodes_[p].requires_grad) continue;
      auto& dst = grads[p].storage();
      const auto& src = parent_grads[k].storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return Gradients(std::move(grads));
}

ScopedGradientFault::ScopedGradientFault(std::string op, double relative_error)
    : previous_op_(g_fault_op), previous_error_(g_fault_error) {
  g_fault_op = std::move(op);
  g_fault_error = relative_error;
}

ScopedGradientFault::~ScopedGradientFault() {
  g_fault_op = previous_op_;
  g_fault_error = previous_error_;
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  return tape.record(
      matmul_values(av, bv), {a, b},
      [](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        // dA = G B^T, dB = A^T G
        return std::vector<Tensor>{matmul_values(g, transpose_values(*in[1])),
                                   matmul_values(transpose_values(*in[0]), g)};
      },
      "matmul");
}

Var transpose(Var a) {
  Tape& tape = same_tape({a});
  require_matrix(a.value(), "transpose");
  return tape.record(
      transpose_values(a.value()), {a},
      [](const Tensor& g, std::span<const Tensor* const>, const Tensor&) {
        return std::vector<Tensor>{transpose_values(g)};
      },
      "transpose");
}

Var add(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape.record(
      std::move(out), {a, b},
      [](const Tensor& g, std::span<const Tensor* const>, const Tensor&) {
        return std::vector<Tensor>{g, g};
      },
      "add");
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape.record(
      std::move(out), {a, b},
      [](const Tensor& g, std::span<const Tensor* const>, const Tensor&) {
        Tensor neg = g;
        for (double& v : neg.storage()) v = -v;
        return std::vector<Tensor>{g, std::move(neg)};
      },
      "sub");
}

Var scale(Var a, double factor) {
  Tape& tape = same_tape({a});
  Tensor out = a.value();
  for (double& v : out.storage()) v *= factor;
  return tape.record(
      std::move(out), {a},
      [factor](const Tensor& g, std::span<const Tensor* const>, const Tensor&) {
        Tensor ga = g;
        for (double& v : ga.storage()) v *= factor;
        return std::vector<Tensor>{std::move(ga)};
      },
      "scale");
}

Var add_row_bias(Var x, Var bias) {
  Tape& tape = same_tape({x, bias});
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_matrix(xv, "add_row_bias");
  if (bv.rank() != 1 || bv.dim(0) != xv.cols()) {
    throw DimensionError("add_row_bias: bias " + shape_string(bv.shape()) +
                         " does not match rows of " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  }
  return tape.record(
      std::move(out), {x, bias},
      [](const Tensor& g, std::span<const Tensor* const>, const Tensor&) {
        Tensor gb({g.cols()});
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
        }
        return std::vector<Tensor>{g, std::move(gb)};
      },
      "add_row_bias");
}

Var relu(Var x) {
  Tape& tape = same_tape({x});
  Tensor out = x.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return tape.record(
      std::move(out), {x},
      [](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        Tensor gx = g;
        const Tensor& xv = *in[0];
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (!(xv[i] > 0.0)) gx[i] = 0.0;
        }
        return std::vector<Tensor>{std::move(gx)};
      },
      "relu");
}

Var log_softmax(Var logits) {
  Tape& tape = same_tape({logits});
  const Tensor& lv = logits.value();
  require_matrix(lv, "log_softmax");
  if (lv.cols() < 2) throw DimensionError("log_softmax needs at least two classes");
  Tensor out({lv.rows(), lv.cols()});
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < lv.cols(); ++c) out(r, c) = row[c] - lse;
  }
  return tape.record(
      std::move(out), {logits},
      [](const Tensor& g, std::span<const Tensor* const>, const Tensor& out) {
        // dx = g - softmax * rowsum(g)
        Tensor gx = g;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < g.cols(); ++c) gs += g(r, c);
          for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) -= std::exp(out(r, c)) * gs;
        }
        return std::vector<Tensor>{std::move(gx)};
      },
      "log_softmax");
}

Var batch_mean(Var z) {
  Tape& tape = same_tape({z});
  const Tensor& zv = z.value();
  require_matrix(zv, "batch_mean");
  const std::size_t b = zv.rows(), d = zv.cols();
  if (b == 0) throw EmptyBatchError("batch_mean over an empty batch");
  Tensor mean({d});
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += zv(r, c);
  }
  for (double& v : mean.storage()) v /= static_cast<double>(b);
  return tape.record(
      std::move(mean), {z},
      [](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        const std::size_t rows = in[0]->rows();
        Tensor gz(in[0]->shape());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < g.size(); ++c) gz(r, c) = g[c] / static_cast<double>(rows);
        }
        return std::vector<Tensor>{std::move(gz)};
      },
      "batch_mean");
}

namespace {

Tensor centered(const Tensor& z) {
  const std::size_t b = z.rows(), d = z.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += z(r, c);
  }
  for (double& v : mean) v /= static_cast<double>(b);
  Tensor out = z;
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < d; ++c) out(r, c) -= mean[c];
  }
  return out;
}

}  // namespace

Var batch_covariance(Var z) {
  Tape& tape = same_tape({z});
  const Tensor& zv = z.value();
  require_matrix(zv, "batch_covariance");
  const std::size_t b = zv.rows(), d = zv.cols();
  if (b < 2) {
    throw InsufficientSamplesError("batch_covariance needs at least 2 rows, got " +
                                   std::to_string(b));
  }
  const Tensor dev = centered(zv);
  const double inv = 1.0 / static_cast<double>(b - 1);
  Tensor cov({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < b; ++r) s += dev(r, i) * dev(r, j);
      cov(i, j) = s * inv;
      cov(j, i) = cov(i, j);
    }
  }
  return tape.record(
      std::move(cov), {z},
      [](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        // dZ = D (G + G^T) / (b - 1); the centering projection is absorbed
        // because the columns of D already sum to zero.
        const Tensor dev = centered(*in[0]);
        const std::size_t d = g.rows();
        Tensor sym({d, d});
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < d; ++j) sym(i, j) = g(i, j) + g(j, i);
        }
        Tensor gz = matmul_values(dev, sym);
        const double inv = 1.0 / static_cast<double>(dev.rows() - 1);
        for (double& v : gz.storage()) v *= inv;
        return std::vector<Tensor>{std::move(gz)};
      },
      "batch_covariance");
}

Var sq_frobenius_dist(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "sq_frobenius_dist");
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double diff = a.value()[i] - b.value()[i];
    s += diff * diff;
  }
  return tape.record(
      Tensor::scalar(s), {a, b},
      [](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        const double up = g.item();
        Tensor ga(in[0]->shape()), gb(in[0]->shape());
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const double diff = 2.0 * ((*in[0])[i] - (*in[1])[i]) * up;
          ga[i] = diff;
          gb[i] = -diff;
        }
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
      },
      "sq_frobenius_dist");
}

Var sum(Var x) {
  Tape& tape = same_tape({x});
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape.record(
      Tensor::scalar(s), {x},
      [](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        return std::vector<Tensor>{Tensor(in[0]->shape(), g.item())};
      },
      "sum");
}

Var pick_sum(Var x, std::vector<int> labels) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "pick_sum");
  if (labels.size() != xv.rows()) {
    throw DimensionError("pick_sum: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(xv.rows()) + " rows");
  }
  double s = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= xv.cols()) {
      throw ContractError("pick_sum: label " + std::to_string(labels[r]) + " out of range");
    }
    s += xv(r, static_cast<std::size_t>(labels[r]));
  }
  return tape.record(
      Tensor::scalar(s), {x},
      [labels = std::move(labels)](const Tensor& g, std::span<const Tensor* const> in,
                                   const Tensor&) {
        Tensor gx(in[0]->shape());
        for (std::size_t r = 0; r < labels.size(); ++r) {
          gx(r, static_cast<std::size_t>(labels[r])) = g.item();
        }
        return std::vector<Tensor>{std::move(gx)};
      },
      "pick_sum");
}

Var slice(Var flat, std::size_t offset, Tensor::Shape shape) {
  Tape& tape = same_tape({flat});
  Tensor out(std::move(shape));
  const Tensor& fv = flat.value();
  if (offset + out.size() > fv.size()) {
    throw DimensionError("slice: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + out.size()) + ") exceeds " +
                         std::to_string(fv.size()) + " elements");
  }
  std::copy_n(fv.data().begin() + static_cast<std::ptrdiff_t>(offset), out.size(),
              out.data().begin());
  return tape.record(
      std::move(out), {flat},
      [offset](const Tensor& g, std::span<const Tensor* const> in, const Tensor&) {
        Tensor gf(in[0]->shape());
        std::copy_n(g.data().begin(), g.size(),
                    gf.data().begin() + static_cast<std::ptrdiff_t>(offset));
        return std::vector<Tensor>{std::move(gf)};
      },
      "slice");
}

}  // namespace cmcl
