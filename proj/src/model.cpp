#include "cmcl/model.hpp"

#include <cmath>

#include "cmcl/errors.hpp"

namespace cmcl {

FeatureExtractor::FeatureExtractor(std::size_t input_dim, std::vector<AffineLayer> layers,
                                   bool relu_last)
    : input_dim_(input_dim), layers_(std::move(layers)), relu_last_(relu_last) {
  std::size_t width = input_dim_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const AffineLayer& layer = layers_[i];
    if (layer.weight.rank() != 2 || layer.weight.cols() != width ||
        layer.bias.rank() != 1 || layer.bias.dim(0) != layer.weight.rows()) {
      throw DimensionError("extractor layer " + std::to_string(i) + " has weight " +
                           shape_string(layer.weight.shape()) + " and bias " +
                           shape_string(layer.bias.shape()) + " after width " +
                           std::to_string(width));
    }
    width = layer.weight.rows();
  }
}

FeatureExtractor FeatureExtractor::random(std::size_t input_dim,
                                          const std::vector<std::size_t>& widths,
                                          bool relu_last, Rng& rng) {
  std::vector<AffineLayer> layers;
  std::size_t fan_in = input_dim;
  for (std::size_t width : widths) {
    if (width == 0) throw ValidationError("model", "layer width must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w({width, fan_in});
    for (double& v : w.storage()) v = rng.uniform(-bound, bound);
    layers.push_back({std::move(w), Tensor({width})});
    fan_in = width;
  }
  return FeatureExtractor(input_dim, std::move(layers), relu_last);
}

std::size_t FeatureExtractor::feature_dim() const {
  return layers_.empty() ? input_dim_ : layers_.back().weight.rows();
}

CmclModel CmclModel::create(const ModelSpec& spec, std::size_t input_dim, std::size_t classes,
                            std::size_t domains, Rng& rng) {
  CmclModel model;
  if (spec.feature_dim == 0) {
    if (!spec.hidden.empty()) {
      throw ValidationError("model.feature_dim", "must be positive when hidden layers are given");
    }
    model.extractor = FeatureExtractor::identity(input_dim);
  } else {
    std::vector<std::size_t> widths = spec.hidden;
    widths.push_back(spec.feature_dim);
    model.extractor = FeatureExtractor::random(input_dim, widths, spec.relu_last, rng);
  }
  const std::size_t d = model.extractor.feature_dim();
  model.domain_classifiers.assign(domains, SoftmaxClassifier::zeros(classes, d));
  model.global_classifier = SoftmaxClassifier::zeros(classes, d);
  model.validate();
  return model;
}

void CmclModel::validate() const {
  if (domain_classifiers.empty()) throw DimensionError("model has no domain classifiers");
  const Tensor::Shape expected{global_classifier.class_count(), extractor.feature_dim()};
  if (global_classifier.weight.shape() != expected) {
    throw DimensionError("global classifier " + shape_string(global_classifier.weight.shape()) +
                         " does not match feature dim " +
                         std::to_string(extractor.feature_dim()));
  }
  for (std::size_t j = 0; j < domain_classifiers.size(); ++j) {
    if (domain_classifiers[j].weight.shape() != expected) {
      throw DimensionError("domain classifier " + std::to_string(j) + " has shape " +
                           shape_string(domain_classifiers[j].weight.shape()) + ", expected " +
                           shape_string(expected));
    }
  }
}

EmaState::EmaState(FeatureExtractor extractor, SoftmaxClassifier global, double alpha)
    : extractor_(std::move(extractor)), global_(std::move(global)), alpha_(alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ValidationError("ema_alpha", "must lie in (0, 1], got " + std::to_string(alpha));
  }
}

namespace {

void ema_tensor(Tensor& target, const Tensor& online, double alpha) {
  if (target.shape() != online.shape()) {
    throw DimensionError("ema_update: target " + shape_string(target.shape()) +
                         " vs online " + shape_string(online.shape()));
  }
  if (alpha == 1.0) {
    target = online;
    return;
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] += alpha * (online[i] - target[i]);
  }
}

}  // namespace

void ema_update(EmaState& state, const FeatureExtractor& online_extractor,
                const SoftmaxClassifier& online_global) {
  auto& target_layers = state.extractor().layers();
  if (target_layers.size() != online_extractor.layers().size() ||
      state.extractor().input_dim() != online_extractor.input_dim()) {
    throw DimensionError("ema_update: extractor depth or input width differs");
  }
  ema_tensor(state.global_classifier().weight, online_global.weight, state.alpha());
  for (std::size_t i = 0; i < target_layers.size(); ++i) {
    ema_tensor(target_layers[i].weight, online_extractor.layers()[i].weight, state.alpha());
    ema_tensor(target_layers[i].bias, online_extractor.layers()[i].bias, state.alpha());
  }
}

SoftmaxClassifier average_classifiers(const CmclModel& model) {
  if (model.domain_classifiers.empty()) {
    throw ContractError("average_classifiers needs at least one classifier");
  }
  SoftmaxClassifier mean = model.domain_classifiers.front();
  for (std::size_t j = 1; j < model.domain_classifiers.size(); ++j) {
    const Tensor& w = model.domain_classifiers[j].weight;
    for (std::size_t i = 0; i < w.size(); ++i) mean.weight[i] += w[i];
  }
  const double n = static_cast<double>(model.domain_classifiers.size());
  for (double& v : mean.weight.storage()) v /= n;
  return mean;
}

std::vector<ParamRef> parameters(CmclModel& model) {
  std::vector<ParamRef> refs;
  auto& layers = model.extractor.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "extractor.layer" + std::to_string(i);
    refs.push_back({prefix + ".weight", &layers[i].weight, ParamGroup::Extractor, false});
    refs.push_back({prefix + ".bias", &layers[i].bias, ParamGroup::Extractor, true});
  }
  for (std::size_t j = 0; j < model.domain_classifiers.size(); ++j) {
    refs.push_back({"domain" + std::to_string(j) + ".W", &model.domain_classifiers[j].weight,
                    ParamGroup::Domain, false});
  }
  refs.push_back({"global.W", &model.global_classifier.weight, ParamGroup::Global, false});
  return refs;
}

std::size_t parameter_count(const CmclModel& model) {
  return 2 * model.extractor.layers().size() + model.domain_classifiers.size() + 1;
}

std::vector<Var> BoundModel::vars() const {
  std::vector<Var> out;
  for (std::size_t i = 0; i < extractor.weights.size(); ++i) {
    out.push_back(extractor.weights[i]);
    out.push_back(extractor.biases[i]);
  }
  out.insert(out.end(), domain.begin(), domain.end());
  out.push_back(global);
  return out;
}

BoundExtractor bind(Tape& tape, const FeatureExtractor& extractor, bool trainable) {
  BoundExtractor bound;
  bound.relu_last = extractor.relu_last();
  bound.input_dim = extractor.input_dim();
  for (const AffineLayer& layer : extractor.layers()) {
    bound.weights.push_back(trainable ? tape.parameter(layer.weight) : tape.constant(layer.weight));
    bound.biases.push_back(trainable ? tape.parameter(layer.bias) : tape.constant(layer.bias));
  }
  return bound;
}

BoundModel bind(Tape& tape, const CmclModel& model, Trainable trainable) {
  BoundModel bound;
  bound.extractor = bind(tape, model.extractor, trainable.extractor);
  for (const SoftmaxClassifier& c : model.domain_classifiers) {
    bound.domain.push_back(trainable.domain ? tape.parameter(c.weight) : tape.constant(c.weight));
  }
  const Tensor& g = model.global_classifier.weight;
  bound.global = trainable.global ? tape.parameter(g) : tape.constant(g);
  return bound;
}

Var extract_features(const BoundExtractor& extractor, Var x) {
  if (x.value().rank() != 2 || x.value().cols() != extractor.input_dim) {
    throw DimensionError("extract_features: input " + shape_string(x.shape()) +
                         " does not match extractor input width " +
                         std::to_string(extractor.input_dim));
  }
  Var h = x;
  const std::size_t depth = extractor.weights.size();
  for (std::size_t i = 0; i < depth; ++i) {
    h = add_row_bias(matmul(h, transpose(extractor.weights[i])), extractor.biases[i]);
    if (i + 1 < depth || extractor.relu_last) h = relu(h);
  }
  return h;
}

Var posterior(Var classifier_weight, Var z) {
  if (z.value().rank() != 2 || z.value().cols() != classifier_weight.value().cols()) {
    throw DimensionError("posterior: features " + shape_string(z.shape()) +
                         " do not match classifier " + shape_string(classifier_weight.shape()));
  }
  return log_softmax(matmul(z, transpose(classifier_weight)));
}

Tensor extract_features(const FeatureExtractor& extractor, const Tensor& x) {
  Tape tape;
  return extract_features(bind(tape, extractor, false), tape.constant(x)).value();
}

Tensor posterior(const SoftmaxClassifier& classifier, const Tensor& z) {
  Tape tape;
  return posterior(tape.constant(classifier.weight), tape.constant(z)).value();
}

namespace {

bool in_groups(ParamGroup g, Trainable groups) {
  switch (g) {
    case ParamGroup::Extractor:
      return groups.extractor;
    case ParamGroup::Domain:
      return groups.domain;
    case ParamGroup::Global:
      return groups.global;
  }
  return false;
}

}  // namespace

Tensor flatten_parameters(const CmclModel& model, Trainable groups) {
  CmclModel copy = model;
  std::vector<double> flat;
  for (const ParamRef& p : parameters(copy)) {
    if (!in_groups(p.group, groups)) continue;
    flat.insert(flat.end(), p.value->data().begin(), p.value->data().end());
  }
  const std::size_t n = flat.size();
  return Tensor({n}, std::move(flat));
}

BoundModel bind_flat(Tape& tape, Var theta, const CmclModel& model, Trainable groups) {
  CmclModel copy = model;
  std::vector<Var> vars;
  std::size_t offset = 0;
  for (const ParamRef& p : parameters(copy)) {
    if (in_groups(p.group, groups)) {
      vars.push_back(slice(theta, offset, p.value->shape()));
      offset += p.value->size();
    } else {
      vars.push_back(tape.constant(*p.value));
    }
  }
  if (offset != theta.value().size()) {
    throw DimensionError("bind_flat: theta has " + std::to_string(theta.value().size()) +
                         " elements, model groups need " + std::to_string(offset));
  }
  BoundModel bound;
  bound.extractor.relu_last = model.extractor.relu_last();
  bound.extractor.input_dim = model.extractor.input_dim();
  std::size_t k = 0;
  for (std::size_t i = 0; i < model.extractor.layers().size(); ++i) {
    bound.extractor.weights.push_back(vars[k++]);
    bound.extractor.biases.push_back(vars[k++]);
  }
  for (std::size_t j = 0; j < model.domain_classifiers.size(); ++j) bound.domain.push_back(vars[k++]);
  bound.global = vars[k];
  return bound;
}

std::vector<Tensor> gradients_in_order(const Gradients& grads, const BoundModel& bound) {
  std::vector<Tensor> out;
  for (const Var& v : bound.vars()) out.push_back(grads.of(v));
  return out;
}

}  // namespace cmcl
