#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace stae {

// Writes to a sibling temp file, then renames over `path`, so readers never
// observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);

// Minimal CSV builder; cells are written verbatim.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  CsvWriter& row(const std::vector<std::string>& cells);
  const std::string& text() const { return text_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::size_t columns_;
  std::string text_;
};

}  // namespace stae
