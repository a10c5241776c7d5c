#include "chainflow/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace chainflow {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<KeyValue> parse_key_values(std::string_view text, const std::string& source) {
  std::vector<KeyValue> out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    ++line_no;
    pos = nl + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(source, line_no, "expected 'key = value'");
    std::string_view key = trim(line.substr(0, eq));
    std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(source, line_no, "missing key");
    if (value.empty()) throw ParseError(source, line_no, "missing value for '" + std::string(key) + "'");
    for (const auto& kv : out)
      if (kv.key == key) throw ParseError(source, line_no, "duplicate key '" + std::string(key) + "'");
    out.push_back({std::string(key), std::string(value), line_no});
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

double kv_double(const KeyValue& kv, const std::string& source) {
  try {
    std::size_t used = 0;
    const double v = std::stod(kv.value, &used);
    if (used == kv.value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(source, kv.line, "'" + kv.key + "' expects a number, got '" + kv.value + "'");
}

long long kv_int(const KeyValue& kv, const std::string& source) {
  long long v = 0;
  auto [p, ec] = std::from_chars(kv.value.data(), kv.value.data() + kv.value.size(), v);
  if (ec != std::errc() || p != kv.value.data() + kv.value.size())
    throw ParseError(source, kv.line, "'" + kv.key + "' expects an integer, got '" + kv.value + "'");
  return v;
}

std::uint64_t kv_u64(const KeyValue& kv, const std::string& source) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(kv.value.data(), kv.value.data() + kv.value.size(), v);
  if (ec != std::errc() || p != kv.value.data() + kv.value.size())
    throw ParseError(source, kv.line, "'" + kv.key + "' expects an unsigned integer, got '" + kv.value + "'");
  return v;
}

bool kv_bool(const KeyValue& kv, const std::string& source) {
  if (kv.value == "true" || kv.value == "1") return true;
  if (kv.value == "false" || kv.value == "0") return false;
  throw ParseError(source, kv.line, "'" + kv.key + "' expects true or false, got '" + kv.value + "'");
}

std::vector<double> kv_double_list(const KeyValue& kv, const std::string& source) {
  std::vector<double> out;
  std::stringstream ss(kv.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KeyValue one{kv.key, std::string(trim(item)), kv.line};
    out.push_back(kv_double(one, source));
  }
  if (out.empty()) throw ParseError(source, kv.line, "'" + kv.key + "' expects a list of numbers");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace chainflow
