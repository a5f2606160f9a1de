#include "cmcl/checkpoint.hpp"

#include <map>

#include "binary_io.hpp"
#include "cmcl/errors.hpp"

namespace cmcl {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'C', 'L'};

void put_array(std::vector<NamedArray>& out, std::string name, const Tensor& t) {
  out.push_back({std::move(name), t});
}

void put_extractor(std::vector<NamedArray>& out, const std::string& prefix,
                   const FeatureExtractor& fx) {
  for (std::size_t i = 0; i < fx.layers().size(); ++i) {
    const std::string layer = prefix + "layer" + std::to_string(i);
    put_array(out, layer + ".weight", fx.layers()[i].weight);
    put_array(out, layer + ".bias", fx.layers()[i].bias);
  }
}

std::vector<NamedArray> checkpoint_arrays(const CmclModel& model, const EmaState& ema) {
  std::vector<NamedArray> arrays;
  put_extractor(arrays, "extractor.", model.extractor);
  for (std::size_t j = 0; j < model.domain_classifiers.size(); ++j) {
    put_array(arrays, "domain" + std::to_string(j) + ".W", model.domain_classifiers[j].weight);
  }
  put_array(arrays, "global.W", model.global_classifier.weight);
  put_extractor(arrays, "ema.extractor.", ema.extractor());
  put_array(arrays, "ema.global.W", ema.global_classifier().weight);
  put_array(arrays, "extractor.input_dim",
            Tensor({1}, {static_cast<double>(model.extractor.input_dim())}));
  put_array(arrays, "extractor.relu_last",
            Tensor({1}, {model.extractor.relu_last() ? 1.0 : 0.0}));
  put_array(arrays, "ema.alpha", Tensor({1}, {ema.alpha()}));
  return arrays;
}

std::vector<NamedArray> decode_arrays(detail::ByteReader& in) {
  char magic[4];
  in.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  const auto version = in.read<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version) +
                       " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = in.read<std::uint32_t>("array count");
  std::vector<NamedArray> arrays;
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto name_len = in.read<std::uint16_t>("name length");
    std::string name = in.text(name_len, "array name");
    const auto rank = in.read<std::uint8_t>("rank");
    Tensor::Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& dim : shape) {
      const std::size_t at = in.offset();
      const auto d = in.read<std::uint64_t>("dimension");
      if (d != 0 && total > (std::uint64_t{1} << 40) / d) {
        throw FormatError("implausible dimensions for " + name, at);
      }
      dim = d;
      total *= d;
    }
    in.require(total, sizeof(double), name.c_str());
    std::vector<double> data(total);
    in.bytes(data.data(), total * sizeof(double), "array data");
    arrays.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after last array", in.offset());
  return arrays;
}

class ArrayTable {
 public:
  ArrayTable(const std::vector<NamedArray>& arrays, std::size_t end) : end_(end) {
    for (const auto& a : arrays) {
      if (!table_.emplace(a.name, a.value).second) {
        throw FormatError("duplicate array " + a.name, end_);
      }
    }
  }
  bool has(const std::string& name) const { return table_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = table_.find(name);
    if (it == table_.end()) throw FormatError("missing array " + name, end_);
    return it->second;
  }
  double scalar(const std::string& name) const {
    const Tensor& t = get(name);
    if (t.size() != 1) throw FormatError(name + " must hold one value", end_);
    return t[0];
  }
  FeatureExtractor extractor(const std::string& prefix, std::size_t input_dim,
                             bool relu_last) const {
    std::vector<AffineLayer> layers;
    for (std::size_t i = 0; has(prefix + "layer" + std::to_string(i) + ".weight"); ++i) {
      const std::string layer = prefix + "layer" + std::to_string(i);
      layers.push_back({get(layer + ".weight"), get(layer + ".bias")});
    }
    try {
      return FeatureExtractor(input_dim, std::move(layers), relu_last);
    } catch (const DimensionError& e) {
      throw FormatError(std::string("inconsistent extractor: ") + e.what(), end_);
    }
  }

 private:
  std::map<std::string, Tensor> table_;
  std::size_t end_;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CmclModel& model, const EmaState& ema) {
  const auto arrays = checkpoint_arrays(model, ema);
  detail::ByteWriter out;
  out.bytes(kMagic, 4);
  out.u32(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    out.u16(static_cast<std::uint16_t>(a.name.size()));
    out.text(a.name);
    out.u8(static_cast<std::uint8_t>(a.value.rank()));
    for (std::size_t d : a.value.shape()) out.u64(d);
    out.bytes(a.value.data().data(), a.value.size() * sizeof(double));
  }
  return out.buffer();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  const std::size_t end = bytes.size();
  detail::ByteReader in(std::move(bytes));
  const ArrayTable table(decode_arrays(in), end);

  const auto input_dim = static_cast<std::size_t>(table.scalar("extractor.input_dim"));
  const bool relu_last = table.scalar("extractor.relu_last") != 0.0;
  CmclModel model;
  model.extractor = table.extractor("extractor.", input_dim, relu_last);
  for (std::size_t j = 0; table.has("domain" + std::to_string(j) + ".W"); ++j) {
    model.domain_classifiers.push_back({table.get("domain" + std::to_string(j) + ".W")});
  }
  model.global_classifier = {table.get("global.W")};
  try {
    model.validate();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("inconsistent model: ") + e.what(), end);
  }
  FeatureExtractor target = table.extractor("ema.extractor.", input_dim, relu_last);
  SoftmaxClassifier target_global{table.get("ema.global.W")};
  if (target.layers().size() != model.extractor.layers().size() ||
      target_global.weight.shape() != model.global_classifier.weight.shape()) {
    throw FormatError("EMA target does not mirror the online model", end);
  }
  try {
    return {std::move(model),
            EmaState(std::move(target), std::move(target_global), table.scalar("ema.alpha"))};
  } catch (const ValidationError& e) {
    throw FormatError(e.what(), end);
  }
}

void checkpoint_save(const CmclModel& model, const EmaState& ema,
                     const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(model, ema));
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

std::vector<NamedArray> read_checkpoint_arrays(const std::filesystem::path& path) {
  auto in = detail::ByteReader::from_file(path);
  return decode_arrays(in);
}

}  // namespace cmcl
