#include "l2s/config_file.h"

#include <charconv>
#include <fstream>
#include <sstream>

#include "l2s/common.h"

namespace l2s {

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void BadValue(const std::string& key, const std::string& value, const char* what) {
  throw Error(ErrorKind::kConfig, "key '" + key + "': cannot parse '" + value + "' as " + what);
}

}  // namespace

KeyValues ParseKeyValues(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = Trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kConfig, "config line " + std::to_string(line_no) + " lacks '='");
    }
    const std::string key = Trim(t.substr(0, eq));
    if (key.empty()) throw Error(ErrorKind::kConfig, "empty key on line " + std::to_string(line_no));
    kv[key] = Trim(t.substr(eq + 1));
  }
  return kv;
}

KeyValues ReadKeyValueFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseKeyValues(ss.str());
}

long long ParseInt64(const std::string& key, const std::string& value) {
  long long v = 0;
  const auto* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) BadValue(key, value, "an integer");
  return v;
}

int ParseInt(const std::string& key, const std::string& value) {
  return static_cast<int>(ParseInt64(key, value));
}

double ParseDouble(const std::string& key, const std::string& value) {
  double v = 0;
  const auto* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) BadValue(key, value, "a number");
  return v;
}

bool ParseBool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  BadValue(key, value, "a boolean");
}

std::vector<int> ParseIntList(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string t = Trim(item);
    if (t.empty()) continue;
    out.push_back(ParseInt(key, t));
  }
  return out;
}

std::string FormatDouble(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string FormatIntList(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace l2s
