#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mfam::csv {

// Minimal reader for the unquoted, comma-separated files this library
// writes. Fields are trimmed of surrounding whitespace and '\r'.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<size_t> line_numbers;  // 1-based source line of each row

  // Column index by name, or -1.
  int column(std::string_view name) const;
};

Table read(const std::filesystem::path& path);
std::vector<std::string> split(std::string_view line);

// Strict numeric parsing; throws ValidationError with the field text.
double parse_double(std::string_view s);
long parse_long(std::string_view s);

// Round-trip exact formatting (shortest representation).
std::string format(double v);

// Writes to path via a temporary sibling and rename.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace mfam::csv
