#pragma once

// Synthetic multi-domain datasets, splits, batch sampling and the CMDS file format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmcl/losses.hpp"
#include "cmcl/rng.hpp"
#include "cmcl/tensor.hpp"

namespace cmcl {

struct DomainDataset {
  std::string name;
  Tensor x;            // [M x input_dim]
  std::vector<int> y;  // M labels
  std::size_t class_count = 0;

  std::size_t size() const { return y.size(); }
  std::size_t input_dim() const { return x.cols(); }
  /// Throws ValidationError unless labels lie in [0, K) and every class occurs.
  void validate() const;
};

enum class GeneratorKind { RotatedGaussians, SpuriousFeature };

/// Where the unseen domain's generating parameter sits relative to the
/// source parameters. This is a proxy, in generator-parameter space, for
/// whether the unseen marginal lies inside the convex hull of the sources.
enum class HullMode { Interpolated, Extrapolated, Unconstrained };

struct ScenarioSpec {
  std::string name = "scenario";
  GeneratorKind kind = GeneratorKind::RotatedGaussians;
  std::size_t class_count = 2;
  std::size_t samples_per_domain = 600;
  /// Rotation angles in degrees, or spurious correlations rho in [-1, 1].
  std::vector<double> source_params;
  double unseen_param = 0.0;
  HullMode hull = HullMode::Unconstrained;
  /// Standard deviation of per-coordinate Gaussian noise.
  double noise = 0.5;
  /// Prototype radius (rotated) or core-feature mean offset (spurious).
  double signal = 2.0;
  std::size_t input_dim = 4;
  std::uint64_t seed = 0;

  std::size_t source_count() const { return source_params.size(); }
  /// Throws ValidationError naming the offending field.
  void validate() const;
};

/// Sources in order, followed by the unseen domain.
std::vector<DomainDataset> gen_rotated_gaussians(const ScenarioSpec& spec);
std::vector<DomainDataset> gen_spurious_feature(const ScenarioSpec& spec);
std::vector<DomainDataset> generate(const ScenarioSpec& spec);

/// Rotates the first two input coordinates by `degrees`.
DomainDataset rotate_plane(const DomainDataset& ds, double degrees);

/// Stratified, disjoint, exhaustive split; each class sends round(fraction * count)
/// examples (at least one, at most count - 1) to validation. Original order is kept.
std::pair<DomainDataset, DomainDataset> split_train_val(const DomainDataset& ds,
                                                        double val_fraction, std::uint64_t seed);

/// Draws one batch per domain. Each domain walks a shuffled permutation and
/// reshuffles when it is exhausted, so every example appears exactly once per cycle.
class BatchSampler {
 public:
  BatchSampler(std::vector<DomainDataset> datasets, std::size_t batch_size, Rng rng);

  std::vector<DomainBatch> next();
  std::size_t domain_count() const { return datasets_.size(); }

 private:
  struct Cursor {
    Rng rng;
    std::vector<std::size_t> order;
    std::size_t position = 0;
  };
  std::vector<DomainDataset> datasets_;
  std::vector<Cursor> cursors_;
  std::size_t batch_size_;
};

/// Concatenated inputs of several datasets, keeping at most `max_rows_per_dataset` rows each.
Tensor stack_inputs(std::span<const DomainDataset> datasets, std::size_t max_rows_per_dataset);

// CMDS file (little-endian): "CMDS" | u32 version (= 1) | u32 name length |
// UTF-8 name | u64 M | u64 input_dim | u64 K | i32 labels[M] | f64 x[M * input_dim]
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const DomainDataset& ds);
DomainDataset decode_dataset(std::vector<std::uint8_t> bytes);
void dataset_write(const DomainDataset& ds, const std::filesystem::path& path);
DomainDataset dataset_read(const std::filesystem::path& path);

}  // namespace cmcl
