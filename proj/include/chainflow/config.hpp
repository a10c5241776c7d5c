#pragma once

// Plain-text `key = value` files. '#' starts a comment; blank lines are ignored.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chainflow {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, int line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct KeyValue {
  std::string key;
  std::string value;
  int line = 0;
};

std::vector<KeyValue> parse_key_values(std::string_view text, const std::string& source);
std::string read_text_file(const std::filesystem::path& path);

double kv_double(const KeyValue& kv, const std::string& source);
long long kv_int(const KeyValue& kv, const std::string& source);
std::uint64_t kv_u64(const KeyValue& kv, const std::string& source);
bool kv_bool(const KeyValue& kv, const std::string& source);
/// Comma-separated list of reals.
std::vector<double> kv_double_list(const KeyValue& kv, const std::string& source);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace chainflow
