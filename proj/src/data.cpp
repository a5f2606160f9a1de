#include "cmcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "binary_io.hpp"
#include "cmcl/errors.hpp"

namespace cmcl {

void DomainDataset::validate() const {
  if (x.rank() != 2 || x.rows() != y.size()) {
    throw ValidationError(name + ".x", "shape " + shape_string(x.shape()) + " does not match " +
                                           std::to_string(y.size()) + " labels");
  }
  if (class_count < 2) throw ValidationError(name + ".class_count", "must be at least 2");
  std::vector<std::size_t> counts(class_count, 0);
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= class_count) {
      throw ValidationError(name + ".y", "label " + std::to_string(label) + " out of range");
    }
    ++counts[static_cast<std::size_t>(label)];
  }
  for (std::size_t k = 0; k < class_count; ++k) {
    if (counts[k] == 0) {
      throw ValidationError(name + ".y", "class " + std::to_string(k) + " never occurs");
    }
  }
}

void ScenarioSpec::validate() const {
  if (class_count < 2) throw ValidationError("class_count", "must be at least 2");
  if (kind == GeneratorKind::SpuriousFeature && class_count != 2) {
    throw ValidationError("class_count", "spurious-feature scenarios are binary (K = 2)");
  }
  if (source_params.empty()) throw ValidationError("source_params", "no source domains");
  if (samples_per_domain == 0 || samples_per_domain % class_count != 0) {
    throw ValidationError("samples_per_domain",
                          "must be a positive multiple of class_count (balanced classes)");
  }
  if (input_dim < 2) throw ValidationError("input_dim", "must be at least 2");
  if (!(noise >= 0.0) || !std::isfinite(noise)) {
    throw ValidationError("noise", "must be finite and non-negative");
  }
  if (!std::isfinite(signal)) throw ValidationError("signal", "must be finite");
  std::vector<double> all = source_params;
  all.push_back(unseen_param);
  for (double p : all) {
    if (!std::isfinite(p)) throw ValidationError("source_params", "non-finite parameter");
    if (kind == GeneratorKind::SpuriousFeature && (p < -1.0 || p > 1.0)) {
      throw ValidationError("source_params", "spurious correlation must lie in [-1, 1]");
    }
  }
  if (hull == HullMode::Unconstrained) return;
  std::vector<double> sorted = source_params;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ValidationError("source_params", "source parameters must be distinct");
  }
  const bool inside = unseen_param > sorted.front() && unseen_param < sorted.back();
  const bool outside = unseen_param < sorted.front() || unseen_param > sorted.back();
  if (hull == HullMode::Interpolated && !inside) {
    throw ValidationError("unseen_param", "must lie strictly inside the source interval");
  }
  if (hull == HullMode::Extrapolated && !outside) {
    throw ValidationError("unseen_param", "must lie strictly outside the source interval");
  }
}

namespace {

std::vector<int> balanced_labels(std::size_t count, std::size_t classes, Rng& rng) {
  std::vector<int> y(count);
  for (std::size_t i = 0; i < count; ++i) y[i] = static_cast<int>(i % classes);
  rng.shuffle(std::span<int>(y));
  return y;
}

std::string domain_name(const ScenarioSpec& spec, std::size_t index) {
  return index < spec.source_count() ? spec.name + ".source" + std::to_string(index)
                                     : spec.name + ".unseen";
}

template <typename RowFn>
std::vector<DomainDataset> generate_domains(const ScenarioSpec& spec, RowFn&& fill_row) {
  spec.validate();
  std::vector<double> params = spec.source_params;
  params.push_back(spec.unseen_param);
  const Rng root(spec.seed);
  std::vector<DomainDataset> out;
  for (std::size_t d = 0; d < params.size(); ++d) {
    Rng rng = root.substream(static_cast<std::uint64_t>(d));
    DomainDataset ds;
    ds.name = domain_name(spec, d);
    ds.class_count = spec.class_count;
    ds.y = balanced_labels(spec.samples_per_domain, spec.class_count, rng);
    ds.x = Tensor({spec.samples_per_domain, spec.input_dim});
    for (std::size_t r = 0; r < ds.size(); ++r) fill_row(ds.x.row(r), ds.y[r], params[d], rng);
    ds.validate();
    out.push_back(std::move(ds));
  }
  return out;
}

void rotate(std::span<double> row, double degrees) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  const double a = row[0], b = row[1];
  row[0] = c * a - s * b;
  row[1] = s * a + c * b;
}

}  // namespace

std::vector<DomainDataset> gen_rotated_gaussians(const ScenarioSpec& spec) {
  if (spec.kind != GeneratorKind::RotatedGaussians) {
    throw ValidationError("kind", "expected a rotated-gaussians scenario");
  }
  const double k = static_cast<double>(spec.class_count);
  return generate_domains(spec, [&](std::span<double> row, int label, double angle, Rng& rng) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(label) / k;
    row[0] = spec.signal * std::cos(phase) + spec.noise * rng.normal();
    row[1] = spec.signal * std::sin(phase) + spec.noise * rng.normal();
    rotate(row, angle);
    for (std::size_t c = 2; c < row.size(); ++c) row[c] = spec.noise * rng.normal();
  });
}

std::vector<DomainDataset> gen_spurious_feature(const ScenarioSpec& spec) {
  if (spec.kind != GeneratorKind::SpuriousFeature) {
    throw ValidationError("kind", "expected a spurious-feature scenario");
  }
  if (spec.class_count != 2) {
    throw ValidationError("class_count", "spurious-feature scenarios are binary (K = 2)");
  }
  return generate_domains(spec, [&](std::span<double> row, int label, double rho, Rng& rng) {
    const double sign = label == 1 ? 1.0 : -1.0;
    // Core feature: same class-conditional law in every domain.
    row[0] = spec.signal * sign + spec.noise * rng.normal();
    // Spurious feature: agrees with the label sign with probability (1 + rho) / 2,
    // so corr(spurious, sign) = rho.
    const bool agree = rng.uniform() < 0.5 * (1.0 + rho);
    row[1] = agree ? sign : -sign;
    for (std::size_t c = 2; c < row.size(); ++c) row[c] = spec.noise * rng.normal();
  });
}

std::vector<DomainDataset> generate(const ScenarioSpec& spec) {
  switch (spec.kind) {
    case GeneratorKind::RotatedGaussians:
      return gen_rotated_gaussians(spec);
    case GeneratorKind::SpuriousFeature:
      return gen_spurious_feature(spec);
  }
  throw ValidationError("kind", "unknown generator");
}

DomainDataset rotate_plane(const DomainDataset& ds, double degrees) {
  if (ds.input_dim() < 2) throw DimensionError("rotate_plane needs at least two input columns");
  DomainDataset out = ds;
  for (std::size_t r = 0; r < out.size(); ++r) rotate(out.x.row(r), degrees);
  return out;
}

std::pair<DomainDataset, DomainDataset> split_train_val(const DomainDataset& ds,
                                                        double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ValidationError("val_fraction", "must lie strictly between 0 and 1");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class.at(static_cast<std::size_t>(ds.y[i])).push_back(i);
  }
  const Rng root(seed);
  std::vector<bool> to_val(ds.size(), false);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.size() < 2) {
      throw StratificationError("class " + std::to_string(k) + " of " + ds.name + " has " +
                                std::to_string(idx.size()) + " examples; need at least 2");
    }
    Rng rng = root.substream(static_cast<std::uint64_t>(k));
    rng.shuffle(std::span<std::size_t>(idx));
    const double want = std::round(val_fraction * static_cast<double>(idx.size()));
    const std::size_t n_val =
        std::clamp(static_cast<std::size_t>(want), std::size_t{1}, idx.size() - 1);
    for (std::size_t i = 0; i < n_val; ++i) to_val[idx[i]] = true;
  }
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) (to_val[i] ? val_idx : train_idx).push_back(i);

  auto subset = [&](const std::vector<std::size_t>& idx, const char* suffix) {
    DomainDataset out;
    out.name = ds.name + suffix;
    out.class_count = ds.class_count;
    out.x = gather_rows(ds.x, idx);
    for (std::size_t i : idx) out.y.push_back(ds.y[i]);
    return out;
  };
  return {subset(train_idx, ".train"), subset(val_idx, ".val")};
}

BatchSampler::BatchSampler(std::vector<DomainDataset> datasets, std::size_t batch_size, Rng rng)
    : datasets_(std::move(datasets)), batch_size_(batch_size) {
  if (batch_size_ == 0) throw ValidationError("batch_size", "must be at least 1");
  for (std::size_t d = 0; d < datasets_.size(); ++d) {
    if (datasets_[d].size() == 0) throw EmptyBatchError("dataset " + datasets_[d].name + " is empty");
    Cursor c{rng.substream(static_cast<std::uint64_t>(d)), {}, 0};
    c.order.resize(datasets_[d].size());
    for (std::size_t i = 0; i < c.order.size(); ++i) c.order[i] = i;
    c.rng.shuffle(std::span<std::size_t>(c.order));
    cursors_.push_back(std::move(c));
  }
}

std::vector<DomainBatch> BatchSampler::next() {
  std::vector<DomainBatch> batches;
  batches.reserve(datasets_.size());
  for (std::size_t d = 0; d < datasets_.size(); ++d) {
    Cursor& c = cursors_[d];
    std::vector<std::size_t> idx(batch_size_);
    for (std::size_t& i : idx) {
      if (c.position == c.order.size()) {
        c.rng.shuffle(std::span<std::size_t>(c.order));
        c.position = 0;
      }
      i = c.order[c.position++];
    }
    DomainBatch b;
    b.domain_index = d;
    b.x = gather_rows(datasets_[d].x, idx);
    for (std::size_t i : idx) b.y.push_back(datasets_[d].y[i]);
    batches.push_back(std::move(b));
  }
  return batches;
}

Tensor stack_inputs(std::span<const DomainDataset> datasets, std::size_t max_rows_per_dataset) {
  if (datasets.empty()) throw ContractError("stack_inputs: no datasets");
  const std::size_t width = datasets.front().input_dim();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const DomainDataset& ds : datasets) {
    if (ds.input_dim() != width) throw DimensionError("stack_inputs: input widths differ");
    const std::size_t take = std::min(ds.size(), max_rows_per_dataset);
    data.insert(data.end(), ds.x.data().begin(), ds.x.data().begin() + take * width);
    rows += take;
  }
  return Tensor({rows, width}, std::move(data));
}

namespace {
constexpr char kDatasetMagic[4] = {'C', 'M', 'D', 'S'};
}

std::vector<std::uint8_t> encode_dataset(const DomainDataset& ds) {
  detail::ByteWriter out;
  out.bytes(kDatasetMagic, 4);
  out.u32(kDatasetVersion);
  out.u32(static_cast<std::uint32_t>(ds.name.size()));
  out.text(ds.name);
  out.u64(ds.size());
  out.u64(ds.x.rank() == 2 ? ds.x.cols() : 0);
  out.u64(ds.class_count);
  for (int label : ds.y) out.i32(label);
  out.bytes(ds.x.data().data(), ds.x.size() * sizeof(double));
  return out.buffer();
}

DomainDataset decode_dataset(std::vector<std::uint8_t> bytes) {
  detail::ByteReader in(std::move(bytes));
  char magic[4];
  in.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError("bad dataset magic", 0);
  const auto version = in.read<std::uint32_t>("version");
  if (version != kDatasetVersion) {
    throw VersionError("unsupported dataset version " + std::to_string(version));
  }
  DomainDataset ds;
  const auto name_len = in.read<std::uint32_t>("name length");
  in.require(name_len, 1, "domain name");
  ds.name = in.text(name_len, "domain name");
  const auto m = in.read<std::uint64_t>("example count");
  const std::size_t dim_at = in.offset();
  const auto dim = in.read<std::uint64_t>("input_dim");
  const std::size_t k_at = in.offset();
  const auto k = in.read<std::uint64_t>("class count");
  if (k < 2 || k > (1u << 30)) throw FormatError("implausible class count", k_at);
  if (dim != 0 && m > (std::uint64_t{1} << 40) / dim) {
    throw FormatError("implausible dataset shape", dim_at);
  }
  ds.class_count = static_cast<std::size_t>(k);
  in.require(m, sizeof(std::int32_t), "labels");
  ds.y.resize(m);
  for (auto& label : ds.y) {
    const std::size_t at = in.offset();
    label = in.read<std::int32_t>("label");
    if (label < 0 || static_cast<std::uint64_t>(label) >= k) {
      throw FormatError("label " + std::to_string(label) + " out of range", at);
    }
  }
  in.require(m * dim, sizeof(double), "inputs");
  std::vector<double> x(m * dim);
  in.bytes(x.data(), x.size() * sizeof(double), "inputs");
  if (in.remaining() != 0) throw FormatError("trailing bytes after inputs", in.offset());
  ds.x = Tensor({static_cast<std::size_t>(m), static_cast<std::size_t>(dim)}, std::move(x));
  return ds;
}

void dataset_write(const DomainDataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, encode_dataset(ds));
}

DomainDataset dataset_read(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

}  // namespace cmcl
