#pragma once

// Training losses and alignment diagnostics.
//
// Tape-level functions take per-domain feature Vars (one per batch, in
// domain order) so that a single extractor pass can feed several terms.
// Model-level overloads bind a model themselves and return plain values.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "cmcl/autodiff.hpp"
#include "cmcl/model.hpp"

namespace cmcl {

struct DomainBatch {
  std::size_t domain_index = 0;
  Tensor x;            // [b x input_dim]
  std::vector<int> y;  // b labels in [0, K)

  std::size_t size() const { return y.size(); }
};

struct DomainMoments {
  Tensor mean;  // [d]
  Tensor cov;   // [d x d]
};

DomainMoments domain_moments(const Tensor& features);

/// Checks batch i carries domain i, labels lie in [0, K) and x matches y.
void validate_batches(std::span<const DomainBatch> batches, std::size_t domains,
                      std::size_t classes);

/// F(x) for every batch, using the extractor as bound (trainable or frozen).
std::vector<Var> domain_features(const BoundModel& model, Tape& tape,
                                 std::span<const DomainBatch> batches);

/// Pooled cross-entropy over every domain head plus the global head,
/// averaged over the total example count.
Var loss_ce(const BoundModel& model, std::span<const Var> features,
            std::span<const DomainBatch> batches);
/// Pairwise squared distance of batch means over unordered pairs, scaled by 2 / (N (N-1) d).
Var loss_mean(std::span<const Var> features);
/// Pairwise squared Frobenius distance of batch covariances, scaled by 2 / (N (N-1) d^2).
Var loss_cov(std::span<const Var> features);
/// lambda_mean * loss_mean + lambda_cov * loss_cov.
Var loss_mm(std::span<const Var> features, double lambda_mean, double lambda_cov);
/// Per-domain cross-entropy of each domain head on its own domain.
/// Throws ContractError if the features carry gradient (extractor not frozen).
Var loss_dsc(const BoundModel& model, std::span<const Var> features,
             std::span<const DomainBatch> batches);
/// Cross-domain likelihood: data of domain i scored by every other domain head
/// and the global head. Throws ContractError if a domain head is trainable.
Var loss_cdl(const BoundModel& model, std::span<const Var> features,
             std::span<const DomainBatch> batches);

double loss_ce(const CmclModel& model, std::span<const DomainBatch> batches);
double loss_dsc(const CmclModel& model, std::span<const DomainBatch> batches);
double loss_cdl(const CmclModel& model, std::span<const DomainBatch> batches);
double loss_mean(std::span<const Tensor> features);
double loss_cov(std::span<const Tensor> features);
double loss_mm(std::span<const Tensor> features, double lambda_mean, double lambda_cov);

/// KL(p || q) with 0 log 0 = 0. Throws ContractError if p or q is not a
/// distribution, DivergenceInfiniteError if q is zero where p is positive.
double kl_categorical(std::span<const double> p, std::span<const double> q);

struct KlTerms {
  double negative_entropy;  // sum p log p
  double cross;             // -sum p log q
};
/// Splits KL(p || q) into negative entropy of p plus cross-entropy of q under p.
KlTerms kl_decomposition_check(std::span<const double> p, std::span<const double> q);

/// Mean over probe rows and unordered domain pairs of the symmetric KL
/// between domain-specific posteriors on the online extractor's features.
double posterior_alignment_diag(const CmclModel& model, const Tensor& probe);

}  // namespace cmcl
