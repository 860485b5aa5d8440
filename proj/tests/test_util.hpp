#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "mhgpt/rng.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("mhgpt-" + tag + "-" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

/// Random valid UTF-8: mostly ASCII (letters, digits, punctuation,
/// whitespace) with 2-, 3- and 4-byte code points mixed in.
inline std::string random_utf8(mhgpt::Rng& rng, std::size_t max_code_points) {
  std::string s;
  const auto n = rng.below(max_code_points + 1);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto kind = rng.below(10);
    std::uint32_t cp = 0;
    if (kind < 6) {
      cp = static_cast<std::uint32_t>(0x20 + rng.below(0x5F));
    } else if (kind == 6) {
      static constexpr char ws[] = {' ', '\n', '\t', '\r'};
      cp = static_cast<std::uint32_t>(ws[rng.below(4)]);
    } else if (kind == 7) {
      cp = static_cast<std::uint32_t>(0x80 + rng.below(0x800 - 0x80));
    } else if (kind == 8) {
      do {
        cp = static_cast<std::uint32_t>(0x800 + rng.below(0x10000 - 0x800));
      } while (cp >= 0xD800 && cp <= 0xDFFF);
    } else {
      cp = static_cast<std::uint32_t>(0x10000 + rng.below(0x110000 - 0x10000));
    }
    append_utf8(s, cp);
  }
  return s;
}

}  // namespace testing
