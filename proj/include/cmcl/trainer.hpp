#pragma once

// Three-stage alternating optimization:
//   A: extractor + all heads on cross-entropy plus moment matching, then EMA;
//   B: frozen extractor, domain heads on their own domains, global head set
//      to the mean of the domain heads;
//   C: frozen domain heads, extractor + global head on cross-domain
//      likelihood, then EMA.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmcl/checkpoint.hpp"
#include "cmcl/data.hpp"
#include "cmcl/losses.hpp"
#include "cmcl/model.hpp"
#include "cmcl/optim.hpp"

namespace cmcl {

struct TrainConfig {
  std::size_t outer_iters = 100;
  std::size_t stage_a_iters = 1;
  std::size_t stage_b_iters = 8;
  std::size_t stage_c_iters = 6;
  double lambda_mean = 0.001;
  double lambda_cov = 0.01;
  double ema_alpha = 0.001;
  std::size_t batch_size = 64;
  /// Extractor and global head (also the domain heads during stage A).
  OptimizerSpec extractor_optimizer = {OptimizerKind::MomentumSgd, 0.05, 0.9, 0.9, 0.999, 1e-8, 5e-4};
  /// Domain heads during stage B.
  OptimizerSpec classifier_optimizer = {OptimizerKind::AdamW, 1e-5, 0.0, 0.9, 0.999, 1e-8, 5e-4};
  ModelSpec model;
  /// Validate every `eval_every` outer iterations (and after the last one).
  std::size_t eval_every = 1;
  /// Rows per validation set fed to the alignment diagnostic.
  std::size_t probe_rows = 128;
  std::uint64_t seed = 0;

  /// Throws ValidationError naming the offending field.
  void validate() const;
  /// The same run with moment matching and stages B/C disabled (pooled ERM).
  TrainConfig erm_baseline() const;
};

struct MetricsRow {
  std::size_t outer_iter = 0;  // 1-based
  char stage = 'A';
  std::size_t inner_iter = 0;  // 1-based within the stage
  std::optional<double> loss_ce, loss_mean, loss_cov, loss_dsc, loss_cdl;
  double align_symkl = 0.0;
  std::optional<double> val_acc_online, val_acc_target;
};

inline constexpr const char* kMetricsHeader =
    "outer_iter,stage,inner_iter,loss_ce,loss_mean,loss_cov,loss_dsc,loss_cdl,align_symkl,"
    "val_acc_online,val_acc_target";

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);
std::string format_metric(double value);

/// Online model, EMA target and both optimizers.
struct TrainState {
  CmclModel model;
  EmaState ema;
  Optimizer extractor_optimizer;
  Optimizer classifier_optimizer;

  static TrainState create(const TrainConfig& cfg, std::size_t input_dim, std::size_t classes,
                           std::size_t domains);
  TrainState(CmclModel model, const TrainConfig& cfg);
};

struct StageALosses {
  double ce = 0.0;
  double mean = 0.0;
  double cov = 0.0;
  double total = 0.0;
};

StageALosses stage_a_step(TrainState& state, std::span<const DomainBatch> batches,
                          const TrainConfig& cfg);
/// Returns loss_dsc before the update.
double stage_b_step(TrainState& state, std::span<const DomainBatch> batches,
                    const TrainConfig& cfg);
/// Returns loss_cdl before the update.
double stage_c_step(TrainState& state, std::span<const DomainBatch> batches,
                    const TrainConfig& cfg);

/// Top-1 accuracy of (extractor, head) on a dataset.
double accuracy(const FeatureExtractor& extractor, const SoftmaxClassifier& head,
                const DomainDataset& ds);

struct TrainResult {
  CmclModel model;
  EmaState ema;
  std::vector<MetricsRow> metrics;
  /// Snapshot with the best mean target-model validation accuracy.
  Checkpoint best;
  std::size_t best_outer_iter = 0;
  std::optional<double> best_val_acc;
};

/// Observer invoked after every logged step; may be empty.
using StepObserver = std::function<void(const MetricsRow&, const TrainState&)>;

TrainResult train(const TrainConfig& cfg, const std::vector<DomainDataset>& train_sets,
                  const std::vector<DomainDataset>& val_sets, const StepObserver& observer = {});

}  // namespace cmcl
