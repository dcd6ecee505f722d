#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plc/tensor.hpp"

namespace plc {

// Binary checkpoint, little-endian:
//   "PLCK" u32 version u32 count
//   count x { u16 name_len, name bytes (UTF-8), u8 rank, rank x u32 extent,
//             numel x f64 }
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Writes to a temporary sibling and renames, so a reader never sees a
// partially written file.
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Copies values from `source` into same-named tensors of `targets`. Throws
// naming the first tensor that is missing or has a different shape.
void restore_tensors(const std::vector<NamedTensor>& source,
                     std::vector<NamedTensor>& targets);

}  // namespace plc
