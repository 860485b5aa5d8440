#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mhgpt {

/// Whole-file read; throws DataError naming the path when unreadable.
std::string read_text(const std::filesystem::path& path);

/// Lines without their terminating '\n' (a trailing '\r' is kept).
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Writes through a temporary file and renames it into place.
void write_text(const std::filesystem::path& path, std::string_view contents);

/// Hex-encoded SHA-256 digests.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace mhgpt
