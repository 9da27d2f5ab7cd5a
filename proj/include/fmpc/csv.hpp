#pragma once

// CSV output: 17 significant digits, '.' decimal separator, LF line endings.

#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace fmpc {

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  if (res.ec != std::errc{}) throw std::runtime_error("number formatting failed");
  return std::string(buf, res.ptr);
}

/// Quotes a field only when it needs it.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path, std::ios::binary), columns_(header.size()) {
    if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_field(header[i]);
    }
    out_ << '\n';
  }

  /// Starts a row; fields are appended with `add` and closed with `end_row`.
  CsvWriter& add(double v) { return add_raw(format_number(v)); }
  CsvWriter& add(long v) { return add_raw(std::to_string(v)); }
  CsvWriter& add(int v) { return add_raw(std::to_string(v)); }
  CsvWriter& add(std::string_view s) { return add_raw(csv_field(s)); }
  CsvWriter& add(const char* s) { return add(std::string_view(s)); }
  CsvWriter& add(const std::string& s) { return add(std::string_view(s)); }

  void end_row() {
    if (fields_ != columns_) {
      throw std::logic_error("CSV row has " + std::to_string(fields_) + " fields, header has " +
                             std::to_string(columns_));
    }
    out_ << '\n';
    fields_ = 0;
  }

 private:
  CsvWriter& add_raw(const std::string& s) {
    if (fields_) out_ << ',';
    out_ << s;
    ++fields_;
    return *this;
  }

  std::ofstream out_;
  std::size_t columns_;
  std::size_t fields_ = 0;
};

}  // namespace fmpc
