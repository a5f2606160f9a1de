#include "cmcl/trainer.hpp"

#include <charconv>
#include <cmath>
#include <ostream>

#include "cmcl/errors.hpp"

namespace cmcl {

void TrainConfig::validate() const {
  if (!(ema_alpha > 0.0 && ema_alpha <= 1.0)) {
    throw ValidationError("train.ema_alpha", "must lie in (0, 1]");
  }
  if (!(lambda_mean >= 0.0) || !std::isfinite(lambda_mean)) {
    throw ValidationError("train.lambda_mean", "must be finite and >= 0");
  }
  if (!(lambda_cov >= 0.0) || !std::isfinite(lambda_cov)) {
    throw ValidationError("train.lambda_cov", "must be finite and >= 0");
  }
  if (batch_size == 0) throw ValidationError("train.batch_size", "must be at least 1");
  if (lambda_cov > 0.0 && batch_size < 2) {
    throw ValidationError("train.batch_size", "covariance matching needs at least 2 rows");
  }
  if (eval_every == 0) throw ValidationError("train.eval_every", "must be at least 1");
  if (probe_rows == 0) throw ValidationError("train.probe_rows", "must be at least 1");
  extractor_optimizer.validate("train.extractor_optimizer");
  classifier_optimizer.validate("train.classifier_optimizer");
}

TrainConfig TrainConfig::erm_baseline() const {
  TrainConfig erm = *this;
  erm.lambda_mean = 0.0;
  erm.lambda_cov = 0.0;
  erm.stage_b_iters = 0;
  erm.stage_c_iters = 0;
  return erm;
}

std::string format_metric(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
  out << kMetricsHeader << '\n';
  auto field = [&](const std::optional<double>& v) {
    out << ',';
    if (v) out << format_metric(*v);
  };
  for (const MetricsRow& r : rows) {
    out << r.outer_iter << ',' << r.stage << ',' << r.inner_iter;
    field(r.loss_ce);
    field(r.loss_mean);
    field(r.loss_cov);
    field(r.loss_dsc);
    field(r.loss_cdl);
    field(r.align_symkl);
    field(r.val_acc_online);
    field(r.val_acc_target);
    out << '\n';
  }
}

TrainState TrainState::create(const TrainConfig& cfg, std::size_t input_dim, std::size_t classes,
                              std::size_t domains) {
  Rng rng = Rng(cfg.seed).substream("model");
  return TrainState(CmclModel::create(cfg.model, input_dim, classes, domains, rng), cfg);
}

TrainState::TrainState(CmclModel m, const TrainConfig& cfg)
    : model(std::move(m)),
      ema(EmaState::from_online(model, cfg.ema_alpha)),
      extractor_optimizer(cfg.extractor_optimizer, parameter_count(model)),
      classifier_optimizer(cfg.classifier_optimizer, parameter_count(model)) {}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

/// Applies `opt` to every parameter whose group passes `selected`.
template <typename Pred>
void apply_updates(Optimizer& opt, CmclModel& model, const std::vector<Tensor>& grads,
                   Pred&& selected) {
  auto params = parameters(model);
  for (std::size_t slot = 0; slot < params.size(); ++slot) {
    if (!selected(params[slot].group)) continue;
    opt.step(slot, *params[slot].value, grads[slot], !params[slot].is_bias);
    if (!params[slot].value->all_finite()) {
      throw NumericError("non-finite parameter " + params[slot].name + " after update");
    }
  }
}

}  // namespace

StageALosses stage_a_step(TrainState& state, std::span<const DomainBatch> batches,
                          const TrainConfig& cfg) {
  validate_batches(batches, state.model.domain_count(), state.model.class_count());
  Tape tape;
  const BoundModel bound = bind(tape, state.model, Trainable::all());
  const auto z = domain_features(bound, tape, batches);
  StageALosses out;
  Var ce = loss_ce(bound, z, batches);
  Var total = ce;
  out.ce = ce.value().item();
  if (z.size() >= 2) {
    Var mean = loss_mean(z);
    out.mean = mean.value().item();
    total = add(total, scale(mean, cfg.lambda_mean));
    bool cov_defined = true;
    for (const DomainBatch& b : batches) cov_defined = cov_defined && b.size() >= 2;
    if (cov_defined) {
      Var cov = loss_cov(z);
      out.cov = cov.value().item();
      total = add(total, scale(cov, cfg.lambda_cov));
    } else if (cfg.lambda_cov > 0.0) {
      throw InsufficientSamplesError("covariance matching needs batches of at least 2 rows");
    }
  }
  out.total = total.value().item();
  require_finite(out.total, "stage A loss");
  const auto grads = gradients_in_order(tape.backward(total), bound);
  apply_updates(state.extractor_optimizer, state.model, grads, [](ParamGroup) { return true; });
  ema_update(state.ema, state.model.extractor, state.model.global_classifier);
  return out;
}

double stage_b_step(TrainState& state, std::span<const DomainBatch> batches,
                    const TrainConfig&) {
  validate_batches(batches, state.model.domain_count(), state.model.class_count());
  Tape tape;
  const BoundModel bound = bind(tape, state.model, Trainable{false, true, false});
  const auto z = domain_features(bound, tape, batches);
  Var loss = loss_dsc(bound, z, batches);
  const double value = loss.value().item();
  require_finite(value, "stage B loss");
  const auto grads = gradients_in_order(tape.backward(loss), bound);
  apply_updates(state.classifier_optimizer, state.model, grads,
                [](ParamGroup g) { return g == ParamGroup::Domain; });
  state.model.global_classifier = average_classifiers(state.model);
  return value;
}

double stage_c_step(TrainState& state, std::span<const DomainBatch> batches,
                    const TrainConfig&) {
  validate_batches(batches, state.model.domain_count(), state.model.class_count());
  Tape tape;
  const BoundModel bound = bind(tape, state.model, Trainable{true, false, true});
  const auto z = domain_features(bound, tape, batches);
  Var loss = loss_cdl(bound, z, batches);
  const double value = loss.value().item();
  require_finite(value, "stage C loss");
  const auto grads = gradients_in_order(tape.backward(loss), bound);
  apply_updates(state.extractor_optimizer, state.model, grads,
                [](ParamGroup g) { return g != ParamGroup::Domain; });
  ema_update(state.ema, state.model.extractor, state.model.global_classifier);
  return value;
}

double accuracy(const FeatureExtractor& extractor, const SoftmaxClassifier& head,
                const DomainDataset& ds) {
  if (ds.size() == 0) throw EmptyBatchError("accuracy on an empty dataset");
  if (ds.input_dim() != extractor.input_dim() || ds.class_count != head.class_count()) {
    throw DimensionError("dataset " + ds.name + " (input " + std::to_string(ds.input_dim()) +
                         ", K " + std::to_string(ds.class_count) +
                         ") does not match model (input " +
                         std::to_string(extractor.input_dim()) + ", K " +
                         std::to_string(head.class_count()) + ")");
  }
  const Tensor logp = posterior(head, extract_features(extractor, ds.x));
  std::size_t correct = 0;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logp.cols(); ++k) {
      if (logp(r, k) > logp(r, best)) best = k;
    }
    if (best == static_cast<std::size_t>(ds.y[r])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

double mean_accuracy(const FeatureExtractor& fx, const SoftmaxClassifier& head,
                     const std::vector<DomainDataset>& sets) {
  double s = 0.0;
  for (const DomainDataset& ds : sets) s += accuracy(fx, head, ds);
  return s / static_cast<double>(sets.size());
}

std::string step_ref(std::size_t outer, char stage, std::size_t inner) {
  return "outer iteration " + std::to_string(outer) + ", stage " + stage + ", step " +
         std::to_string(inner);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<DomainDataset>& train_sets,
                  const std::vector<DomainDataset>& val_sets, const StepObserver& observer) {
  cfg.validate();
  if (train_sets.size() < 2) {
    throw ValidationError("train", "need at least two source domains, got " +
                                       std::to_string(train_sets.size()));
  }
  if (val_sets.size() != train_sets.size()) {
    throw ValidationError("train", "one validation set per source domain is required");
  }
  const std::size_t input_dim = train_sets[0].input_dim();
  const std::size_t classes = train_sets[0].class_count;
  for (const auto* sets : {&train_sets, &val_sets}) {
    for (const DomainDataset& ds : *sets) {
      ds.validate();
      if (ds.input_dim() != input_dim || ds.class_count != classes) {
        throw ValidationError(ds.name, "input_dim or class count differs from the first domain");
      }
    }
  }

  TrainState state = TrainState::create(cfg, input_dim, classes, train_sets.size());
  BatchSampler sampler(train_sets, cfg.batch_size, Rng(cfg.seed).substream("batches"));
  const Tensor probe = stack_inputs(val_sets, cfg.probe_rows);

  TrainResult result{state.model, state.ema, {}, {state.model, state.ema}, 0, std::nullopt};

  for (std::size_t outer = 1; outer <= cfg.outer_iters; ++outer) {
    auto log_row = [&](MetricsRow row) {
      row.outer_iter = outer;
      row.align_symkl = posterior_alignment_diag(state.model, probe);
      result.metrics.push_back(row);
      if (observer) observer(result.metrics.back(), state);
    };
    auto guarded = [&](char stage, std::size_t inner, auto&& step) {
      try {
        step();
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + step_ref(outer, stage, inner));
      }
    };

    for (std::size_t i = 1; i <= cfg.stage_a_iters; ++i) {
      guarded('A', i, [&] {
        const auto batches = sampler.next();
        const StageALosses l = stage_a_step(state, batches, cfg);
        MetricsRow row;
        row.stage = 'A';
        row.inner_iter = i;
        row.loss_ce = l.ce;
        row.loss_mean = l.mean;
        row.loss_cov = l.cov;
        log_row(row);
      });
    }
    for (std::size_t i = 1; i <= cfg.stage_b_iters; ++i) {
      guarded('B', i, [&] {
        const auto batches = sampler.next();
        MetricsRow row;
        row.stage = 'B';
        row.inner_iter = i;
        row.loss_dsc = stage_b_step(state, batches, cfg);
        log_row(row);
      });
    }
    for (std::size_t i = 1; i <= cfg.stage_c_iters; ++i) {
      guarded('C', i, [&] {
        const auto batches = sampler.next();
        MetricsRow row;
        row.stage = 'C';
        row.inner_iter = i;
        row.loss_cdl = stage_c_step(state, batches, cfg);
        log_row(row);
      });
    }

    const bool evaluate = outer % cfg.eval_every == 0 || outer == cfg.outer_iters;
    if (evaluate && !result.metrics.empty() && result.metrics.back().outer_iter == outer) {
      const double online = mean_accuracy(state.model.extractor,
                                          state.model.global_classifier, val_sets);
      const double target = mean_accuracy(state.ema.extractor(),
                                          state.ema.global_classifier(), val_sets);
      result.metrics.back().val_acc_online = online;
      result.metrics.back().val_acc_target = target;
      if (!result.best_val_acc || target > *result.best_val_acc) {
        result.best_val_acc = target;
        result.best_outer_iter = outer;
        result.best = {state.model, state.ema};
      }
    }
  }
  result.model = std::move(state.model);
  result.ema = std::move(state.ema);
  return result;
}

}  // namespace cmcl
