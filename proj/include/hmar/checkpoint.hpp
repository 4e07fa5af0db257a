#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "hmar/model.hpp"

namespace hmar {

/// Checkpoint layout, little endian:
///   "HMAR0001", u32 metadata length, metadata JSON (model configuration),
///   u32 tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
///   rank x u32 dims, fp32 values.
/// Tensors are stored in fp32, so a loaded model equals the saved one rounded to fp32.
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Every tensor rounded to the nearest fp32 value, as a save/load round trip would.
ModelParams round_to_fp32(const ModelParams& params);

} // namespace hmar
