#pragma once

#include <filesystem>

#include "mcfnet/param.hpp"

namespace mcfnet {

// Checkpoint directory layout:
//   manifest.json  { name: {shape, dtype, offset, length} } in registration order
//   weights.bin    little-endian raw buffers concatenated in manifest order
// offset and length are in bytes.

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamList<T>& params);

/// Overwrites the values of `params` by name. Every parameter must be present
/// with matching shape and dtype; throws IoError otherwise.
template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamList<T>& params);

}  // namespace mcfnet
