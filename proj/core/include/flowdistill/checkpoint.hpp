#pragma once

#include <filesystem>
#include <vector>

#include "flowdistill/params.hpp"

namespace fd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "FDCK" checkpoint: magic, version u32, count u32, then per parameter
// name-length u16, UTF-8 name, rank u8, dims u32 each, f32 payload.
// All integers and floats little-endian.
std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<float>& params);
ParameterSet<float> decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params);
ParameterSet<float> load_checkpoint(const std::filesystem::path& path);

// Loads into an existing set, requiring an identical manifest.
void load_checkpoint_into(const std::filesystem::path& path, ParameterSet<float>& params);

}  // namespace fd
