#include "cmcl/losses.hpp"

#include <cmath>

#include "cmcl/errors.hpp"

namespace cmcl {

namespace {

Var accumulate(Var total, Var term, bool& first) {
  if (first) {
    first = false;
    return term;
  }
  return add(total, term);
}

void require_domains(std::span<const Var> features, const char* op) {
  if (features.size() < 2) {
    throw ContractError(std::string(op) + " needs at least two domains, got " +
                        std::to_string(features.size()));
  }
  const std::size_t d = features[0].value().cols();
  for (const Var& z : features) {
    if (z.value().rank() != 2 || z.value().cols() != d) {
      throw DimensionError(std::string(op) + ": feature widths differ across domains");
    }
  }
}

void require_head_count(const BoundModel& model, std::span<const Var> features,
                        std::span<const DomainBatch> batches, const char* op) {
  if (batches.empty()) throw ContractError(std::string(op) + ": empty batch list");
  if (features.size() != batches.size() || model.domain.size() != batches.size()) {
    throw ContractError(std::string(op) + ": expected one batch per domain (" +
                        std::to_string(model.domain.size()) + "), got " +
                        std::to_string(batches.size()));
  }
}

template <typename Fn>
double with_bound(const CmclModel& model, Trainable trainable,
                  std::span<const DomainBatch> batches, Fn&& fn) {
  validate_batches(batches, model.domain_count(), model.class_count());
  Tape tape;
  const BoundModel bound = bind(tape, model, trainable);
  const auto features = domain_features(bound, tape, batches);
  return fn(bound, std::span<const Var>(features)).value().item();
}

template <typename Fn>
double with_features(std::span<const Tensor> features, Fn&& fn) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& z : features) vars.push_back(tape.constant(z));
  return fn(std::span<const Var>(vars)).value().item();
}

}  // namespace

DomainMoments domain_moments(const Tensor& features) {
  Tape tape;
  Var z = tape.constant(features);
  return {batch_mean(z).value(), batch_covariance(z).value()};
}

void validate_batches(std::span<const DomainBatch> batches, std::size_t domains,
                      std::size_t classes) {
  if (batches.size() != domains) {
    throw ContractError("expected " + std::to_string(domains) + " batches, got " +
                        std::to_string(batches.size()));
  }
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const DomainBatch& b = batches[i];
    if (b.domain_index != i) {
      throw ContractError("batch " + std::to_string(i) + " carries domain " +
                          std::to_string(b.domain_index));
    }
    if (b.y.empty()) throw EmptyBatchError("batch for domain " + std::to_string(i) + " is empty");
    if (b.x.rank() != 2 || b.x.rows() != b.y.size()) {
      throw DimensionError("batch " + std::to_string(i) + ": x " + shape_string(b.x.shape()) +
                           " vs " + std::to_string(b.y.size()) + " labels");
    }
    for (int label : b.y) {
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw ContractError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(classes) + ")");
      }
    }
  }
}

std::vector<Var> domain_features(const BoundModel& model, Tape& tape,
                                 std::span<const DomainBatch> batches) {
  std::vector<Var> out;
  out.reserve(batches.size());
  for (const DomainBatch& b : batches) {
    out.push_back(extract_features(model.extractor, tape.constant(b.x)));
  }
  return out;
}

Var loss_ce(const BoundModel& model, std::span<const Var> features,
            std::span<const DomainBatch> batches) {
  require_head_count(model, features, batches, "loss_ce");
  std::size_t total = 0;
  for (const DomainBatch& b : batches) total += b.size();
  Var acc;
  bool first = true;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    for (const Var& head : model.domain) {
      acc = accumulate(acc, pick_sum(posterior(head, features[i]), batches[i].y), first);
    }
    acc = accumulate(acc, pick_sum(posterior(model.global, features[i]), batches[i].y), first);
  }
  return scale(acc, -1.0 / static_cast<double>(total));
}

Var loss_mean(std::span<const Var> features) {
  require_domains(features, "loss_mean");
  const double n = static_cast<double>(features.size());
  const double d = static_cast<double>(features[0].value().cols());
  std::vector<Var> means;
  for (const Var& z : features) means.push_back(batch_mean(z));
  Var acc;
  bool first = true;
  for (std::size_t i = 0; i < means.size(); ++i) {
    for (std::size_t j = i + 1; j < means.size(); ++j) {
      acc = accumulate(acc, sq_frobenius_dist(means[i], means[j]), first);
    }
  }
  return scale(acc, 2.0 / (n * (n - 1.0) * d));
}

Var loss_cov(std::span<const Var> features) {
  require_domains(features, "loss_cov");
  const double n = static_cast<double>(features.size());
  const double d = static_cast<double>(features[0].value().cols());
  std::vector<Var> covs;
  for (const Var& z : features) covs.push_back(batch_covariance(z));
  Var acc;
  bool first = true;
  for (std::size_t i = 0; i < covs.size(); ++i) {
    for (std::size_t j = i + 1; j < covs.size(); ++j) {
      acc = accumulate(acc, sq_frobenius_dist(covs[i], covs[j]), first);
    }
  }
  return scale(acc, 2.0 / (n * (n - 1.0) * d * d));
}

Var loss_mm(std::span<const Var> features, double lambda_mean, double lambda_cov) {
  return add(scale(loss_mean(features), lambda_mean), scale(loss_cov(features), lambda_cov));
}

Var loss_dsc(const BoundModel& model, std::span<const Var> features,
             std::span<const DomainBatch> batches) {
  require_head_count(model, features, batches, "loss_dsc");
  for (const Var& z : features) {
    if (z.requires_grad()) {
      throw ContractError("loss_dsc: extractor must be frozen (features carry gradient)");
    }
  }
  Var acc;
  bool first = true;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const double w = -1.0 / static_cast<double>(batches[i].size());
    acc = accumulate(acc, scale(pick_sum(posterior(model.domain[i], features[i]), batches[i].y), w),
                     first);
  }
  return acc;
}

Var loss_cdl(const BoundModel& model, std::span<const Var> features,
             std::span<const DomainBatch> batches) {
  require_head_count(model, features, batches, "loss_cdl");
  for (const Var& head : model.domain) {
    if (head.requires_grad()) {
      throw ContractError("loss_cdl: domain classifiers must be frozen");
    }
  }
  Var acc;
  bool first = true;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Var domain_sum;
    bool domain_first = true;
    for (std::size_t j = 0; j < model.domain.size(); ++j) {
      if (j == i) continue;
      domain_sum = accumulate(domain_sum, pick_sum(posterior(model.domain[j], features[i]), batches[i].y),
                              domain_first);
    }
    domain_sum = accumulate(domain_sum, pick_sum(posterior(model.global, features[i]), batches[i].y),
                            domain_first);
    acc = accumulate(acc, scale(domain_sum, -1.0 / static_cast<double>(batches[i].size())), first);
  }
  return acc;
}

double loss_ce(const CmclModel& model, std::span<const DomainBatch> batches) {
  return with_bound(model, Trainable::none(), batches,
                    [&](const BoundModel& m, std::span<const Var> z) { return loss_ce(m, z, batches); });
}

double loss_dsc(const CmclModel& model, std::span<const DomainBatch> batches) {
  return with_bound(model, Trainable::none(), batches,
                    [&](const BoundModel& m, std::span<const Var> z) { return loss_dsc(m, z, batches); });
}

double loss_cdl(const CmclModel& model, std::span<const DomainBatch> batches) {
  return with_bound(model, Trainable::none(), batches,
                    [&](const BoundModel& m, std::span<const Var> z) { return loss_cdl(m, z, batches); });
}

double loss_mean(std::span<const Tensor> features) {
  return with_features(features, [](std::span<const Var> z) { return loss_mean(z); });
}

double loss_cov(std::span<const Tensor> features) {
  return with_features(features, [](std::span<const Var> z) { return loss_cov(z); });
}

double loss_mm(std::span<const Tensor> features, double lambda_mean, double lambda_cov) {
  return with_features(features,
                       [&](std::span<const Var> z) { return loss_mm(z, lambda_mean, lambda_cov); });
}

namespace {

void require_distribution(std::span<const double> p, const char* name) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ContractError(std::string(name) + " has a negative or non-finite entry");
    }
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) {
    throw ContractError(std::string(name) + " sums to " + std::to_string(s) + ", not 1");
  }
}

void require_pair(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw DimensionError("KL operands have lengths " + std::to_string(p.size()) + " and " +
                         std::to_string(q.size()));
  }
  require_distribution(p, "p");
  require_distribution(q, "q");
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0 && q[k] == 0.0) {
      throw DivergenceInfiniteError("KL infinite: q[" + std::to_string(k) + "] = 0 where p > 0");
    }
  }
}

}  // namespace

double kl_categorical(std::span<const double> p, std::span<const double> q) {
  require_pair(p, q);
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) kl += p[k] * (std::log(p[k]) - std::log(q[k]));
  }
  return kl;
}

KlTerms kl_decomposition_check(std::span<const double> p, std::span<const double> q) {
  require_pair(p, q);
  KlTerms terms{0.0, 0.0};
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) {
      terms.negative_entropy += p[k] * std::log(p[k]);
      terms.cross -= p[k] * std::log(q[k]);
    }
  }
  return terms;
}

double posterior_alignment_diag(const CmclModel& model, const Tensor& probe) {
  const std::size_t n = model.domain_count();
  if (n < 2) throw ContractError("posterior_alignment_diag needs at least two domains");
  const Tensor z = extract_features(model.extractor, probe);
  std::vector<Tensor> logp;
  for (const SoftmaxClassifier& c : model.domain_classifiers) logp.push_back(posterior(c, z));
  const std::size_t rows = z.rows(), classes = model.class_count();
  if (rows == 0) throw EmptyBatchError("posterior_alignment_diag: empty probe");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (std::size_t r = 0; r < rows; ++r) {
        // 0.5 (KL(Pi||Pj) + KL(Pj||Pi)) = 0.5 sum (pi - pj)(log pi - log pj)
        double s = 0.0;
        for (std::size_t k = 0; k < classes; ++k) {
          const double li = logp[i](r, k), lj = logp[j](r, k);
          s += (std::exp(li) - std::exp(lj)) * (li - lj);
        }
        total += 0.5 * s;
      }
    }
  }
  const double pairs = static_cast<double>(n * (n - 1) / 2);
  return total / (pairs * static_cast<double>(rows));
}

}  // namespace cmcl
