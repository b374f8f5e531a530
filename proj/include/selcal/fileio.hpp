#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>

namespace selcal {

// Writes through a sibling temporary file and renames it into place, so a
// failure never leaves a partially written `path` behind.
void write_atomically(const std::filesystem::path& path,
                      const std::function<void(std::ostream&)>& writer, bool binary = false);

// Fills a sibling staging directory and renames it onto `dir`, replacing any
// previous contents. The staging directory is removed on failure.
void write_directory_atomically(const std::filesystem::path& dir,
                                const std::function<void(const std::filesystem::path& stage)>& writer);

void write_text_atomically(const std::filesystem::path& path, std::string_view text);

std::string read_text_file(const std::filesystem::path& path);

// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

}  // namespace selcal
