#pragma once

// Feature extractor, bias-free softmax classifiers, the multi-head model and
// its exponential-moving-average target copy.

#include <cstddef>
#include <string>
#include <vector>

#include "cmcl/autodiff.hpp"
#include "cmcl/rng.hpp"
#include "cmcl/tensor.hpp"

namespace cmcl {

struct AffineLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  friend bool operator==(const AffineLayer&, const AffineLayer&) = default;
};

/// Stack of affine maps, each followed by ReLU except optionally the last.
/// A stack with no layers is the identity map.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(std::size_t input_dim, std::vector<AffineLayer> layers, bool relu_last);

  static FeatureExtractor identity(std::size_t dim) { return FeatureExtractor(dim, {}, false); }
  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  /// `widths` lists every layer's output width; the last is the feature dim.
  static FeatureExtractor random(std::size_t input_dim, const std::vector<std::size_t>& widths,
                                 bool relu_last, Rng& rng);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t feature_dim() const;
  bool relu_last() const { return relu_last_; }
  const std::vector<AffineLayer>& layers() const { return layers_; }
  std::vector<AffineLayer>& layers() { return layers_; }

  friend bool operator==(const FeatureExtractor&, const FeatureExtractor&) = default;

 private:
  std::size_t input_dim_ = 0;
  std::vector<AffineLayer> layers_;
  bool relu_last_ = true;
};

/// Posterior P(Y | Z = z) = softmax(W z); no bias term.
struct SoftmaxClassifier {
  Tensor weight;  // [K x d]

  static SoftmaxClassifier zeros(std::size_t classes, std::size_t feature_dim) {
    return {Tensor({classes, feature_dim})};
  }
  std::size_t class_count() const { return weight.rows(); }
  std::size_t feature_dim() const { return weight.cols(); }

  friend bool operator==(const SoftmaxClassifier&, const SoftmaxClassifier&) = default;
};

struct ModelSpec {
  /// Hidden layer widths; an empty list together with feature_dim == 0
  /// selects the identity extractor.
  std::vector<std::size_t> hidden;
  std::size_t feature_dim = 16;
  bool relu_last = true;
};

struct CmclModel {
  FeatureExtractor extractor;
  std::vector<SoftmaxClassifier> domain_classifiers;
  SoftmaxClassifier global_classifier;

  /// Random extractor, zero classifiers (uniform initial posteriors).
  static CmclModel create(const ModelSpec& spec, std::size_t input_dim, std::size_t classes,
                          std::size_t domains, Rng& rng);

  std::size_t domain_count() const { return domain_classifiers.size(); }
  std::size_t class_count() const { return global_classifier.class_count(); }
  /// Throws DimensionError unless every classifier shares (K, d) with the extractor.
  void validate() const;

  friend bool operator==(const CmclModel&, const CmclModel&) = default;
};

/// Target copy of {extractor, global classifier} tracked by EMA.
class EmaState {
 public:
  /// Throws ValidationError unless alpha is in (0, 1].
  EmaState(FeatureExtractor extractor, SoftmaxClassifier global, double alpha);
  static EmaState from_online(const CmclModel& online, double alpha) {
    return EmaState(online.extractor, online.global_classifier, alpha);
  }

  const FeatureExtractor& extractor() const { return extractor_; }
  const SoftmaxClassifier& global_classifier() const { return global_; }
  FeatureExtractor& extractor() { return extractor_; }
  SoftmaxClassifier& global_classifier() { return global_; }
  double alpha() const { return alpha_; }

  friend bool operator==(const EmaState&, const EmaState&) = default;

 private:
  FeatureExtractor extractor_;
  SoftmaxClassifier global_;
  double alpha_;
};

/// target <- target + alpha * (online - target) for every parameter of the
/// extractor and global classifier. With alpha == 1 the target becomes an
/// exact copy.
void ema_update(EmaState& state, const FeatureExtractor& online_extractor,
                const SoftmaxClassifier& online_global);

/// Elementwise mean of the domain classifiers, summed in domain order.
SoftmaxClassifier average_classifiers(const CmclModel& model);

// ---------------------------------------------------------------------------
// Parameter enumeration. Canonical order: extractor layers (weight, bias),
// domain classifiers in order, global classifier.
// ---------------------------------------------------------------------------

enum class ParamGroup { Extractor, Domain, Global };

struct ParamRef {
  std::string name;
  Tensor* value;
  ParamGroup group;
  bool is_bias;
};

std::vector<ParamRef> parameters(CmclModel& model);
std::size_t parameter_count(const CmclModel& model);

// ---------------------------------------------------------------------------
// Tape bindings.
// ---------------------------------------------------------------------------

struct Trainable {
  bool extractor = false;
  bool domain = false;
  bool global = false;

  static Trainable all() { return {true, true, true}; }
  static Trainable none() { return {}; }
};

struct BoundExtractor {
  std::vector<Var> weights;
  std::vector<Var> biases;
  bool relu_last = true;
  std::size_t input_dim = 0;
};

struct BoundModel {
  BoundExtractor extractor;
  std::vector<Var> domain;
  Var global;

  /// Vars in canonical parameter order.
  std::vector<Var> vars() const;
};

/// Places the model on `tape`: trainable groups as parameters, the rest as constants.
BoundModel bind(Tape& tape, const CmclModel& model, Trainable trainable);
BoundExtractor bind(Tape& tape, const FeatureExtractor& extractor, bool trainable);

/// Z = F(X). Throws DimensionError on input width mismatch.
Var extract_features(const BoundExtractor& extractor, Var x);
/// log P(Y | Z) = log_softmax(Z W^T), [b x K].
Var posterior(Var classifier_weight, Var z);

Tensor extract_features(const FeatureExtractor& extractor, const Tensor& x);
Tensor posterior(const SoftmaxClassifier& classifier, const Tensor& z);

/// Trainable-group parameters concatenated in canonical order.
Tensor flatten_parameters(const CmclModel& model, Trainable groups);
/// Like bind(), but trainable groups are slices of the flat vector `theta`
/// (laid out as by flatten_parameters) so gradients land on `theta`.
BoundModel bind_flat(Tape& tape, Var theta, const CmclModel& model, Trainable groups);

/// Gradient tensors of every parameter of `bound`, in canonical order.
std::vector<Tensor> gradients_in_order(const Gradients& grads, const BoundModel& bound);

}  // namespace cmcl
