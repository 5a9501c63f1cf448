#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace fd {

// Lower-case hex SHA-1 digests.
std::string sha1_hex(std::span<const std::uint8_t> bytes);
std::string sha1_hex(std::string_view text);
std::string sha1_file(const std::filesystem::path& path);

}  // namespace fd
