#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace smokecausal::csv {

struct Row {
  std::size_t line = 0;  // 1-based line number in the source file
  std::vector<std::string> fields;
};

struct Table {
  std::filesystem::path source;
  std::vector<std::string> header;
  std::vector<Row> rows;

  // Column index by name; throws ValidationError naming the file if absent.
  std::size_t column(std::string_view name) const;
};

// Reads a comma-separated file with a header line. Fields are trimmed of
// surrounding whitespace; quoting is not supported (none of our schemas need
// it). Throws IoError if the file cannot be opened.
Table read(const std::filesystem::path& path);

// Requires the header to equal `expected` exactly.
void require_header(const Table& t, const std::vector<std::string>& expected);

double parse_double(const Table& t, const Row& r, std::size_t col);
long parse_int(const Table& t, const Row& r, std::size_t col);

// 9 significant digits, round-trippable enough for every artifact we write.
std::string format(double v);

class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::vector<std::string>& header);

  Writer& operator<<(const std::string& field);
  Writer& operator<<(const char* field) { return *this << std::string(field); }
  Writer& operator<<(double v) { return *this << format(v); }
  Writer& operator<<(int v) { return *this << std::to_string(v); }
  Writer& operator<<(long v) { return *this << std::to_string(v); }
  Writer& operator<<(std::size_t v) { return *this << std::to_string(v); }
  void end_row();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  bool row_started_ = false;
};

}  // namespace smokecausal::csv
