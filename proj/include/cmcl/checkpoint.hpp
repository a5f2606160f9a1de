#pragma once

// Binary checkpoint of a model and its EMA target.
//
// Layout (all little-endian):
//   "CMCL" | u32 version (= 1) | u32 array count
//   per array: u16 name length | UTF-8 name | u8 rank | u64 dims[rank] | f64 data
//
// Array names: extractor.layer{i}.weight, extractor.layer{i}.bias, domain{j}.W,
// global.W, ema.extractor.layer{i}.weight, ema.extractor.layer{i}.bias,
// ema.global.W, plus the rank-1 metadata arrays extractor.input_dim,
// extractor.relu_last and ema.alpha.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cmcl/model.hpp"

namespace cmcl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  CmclModel model;
  EmaState ema;
};

std::vector<std::uint8_t> encode_checkpoint(const CmclModel& model, const EmaState& ema);
/// Throws FormatError (with byte offset) or VersionError; never returns a partial model.
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes);

void checkpoint_save(const CmclModel& model, const EmaState& ema,
                     const std::filesystem::path& path);
Checkpoint checkpoint_load(const std::filesystem::path& path);

/// Raw named arrays of a checkpoint file, in file order.
std::vector<NamedArray> read_checkpoint_arrays(const std::filesystem::path& path);

}  // namespace cmcl
