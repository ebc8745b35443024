#include "nullswap/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include "nullswap/evalsuite.hpp"

namespace nullswap {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  }
  return true;
}

// Cuts a trailing comment that is not inside a string.
std::string_view strip_comment(std::string_view line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == '\\' && quote == '"') {
        ++i;
      } else if (c == quote) {
        quote = 0;
      }
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

std::string parse_quoted(std::string_view s) {
  const char q = s.front();
  if (s.size() < 2 || s.back() != q) throw ConfigError("unterminated string: " + std::string(s));
  std::string out;
  for (std::size_t i = 1; i + 1 < s.size(); ++i) {
    char c = s[i];
    if (q == '"' && c == '\\') {
      if (i + 2 >= s.size()) throw ConfigError("dangling escape in " + std::string(s));
      switch (s[++i]) {
        case 'n': c = '\n'; break;
        case 't': c = '\t'; break;
        case '\\': c = '\\'; break;
        case '"': c = '"'; break;
        default: throw ConfigError("unsupported escape in " + std::string(s));
      }
    } else if (c == q) {
      throw ConfigError("unexpected quote inside " + std::string(s));
    }
    out += c;
  }
  return out;
}

std::optional<ConfigValue> parse_number(std::string_view s) {
  std::string cleaned;
  for (char c : s) {
    if (c != '_') cleaned += c;
  }
  if (cleaned.empty()) return std::nullopt;
  const char* b = cleaned.data();
  const char* e = b + cleaned.size();
  if (*b == '+') ++b;
  const bool floating = cleaned.find_first_of(".eEn") != std::string::npos;  // n: inf/nan
  if (!floating) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec == std::errc() && p == e) return v;
    return std::nullopt;
  }
  double v = 0.0;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec == std::errc() && p == e) return v;
  return std::nullopt;
}

std::vector<std::string> split_array(std::string_view body) {
  std::vector<std::string> items;
  std::string current;
  char quote = 0;
  bool any = false;
  auto flush = [&] {
    auto t = trim(current);
    if (!t.empty()) {
      if (t.front() == '"' || t.front() == '\'') {
        items.push_back(parse_quoted(t));
      } else if (parse_number(t) || t == "true" || t == "false") {
        items.emplace_back(t);
      } else {
        throw ConfigError("array items must be quoted strings, numbers or booleans: " + std::string(t));
      }
    } else if (any) {
      throw ConfigError("empty array item");
    }
    current.clear();
  };
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (quote) {
      current += c;
      if (c == '\\' && quote == '"' && i + 1 < body.size()) {
        current += body[++i];
      } else if (c == quote) {
        quote = 0;
      }
    } else if (c == '"' || c == '\'') {
      quote = c;
      current += c;
    } else if (c == ',') {
      any = true;
      flush();
    } else if (c == '[' || c == ']') {
      throw ConfigError("nested arrays are not supported");
    } else {
      current += c;
    }
  }
  if (quote) throw ConfigError("unterminated string in array");
  // a trailing comma is allowed
  if (!trim(current).empty()) flush();
  return items;
}

}  // namespace

ConfigValue parse_config_value(std::string_view text, bool bare_strings) {
  const auto s = trim(text);
  if (s.empty()) throw ConfigError("missing value");
  if (s.front() == '"' || s.front() == '\'') {
    if (s.size() >= 3 && s.substr(0, 3) == std::string(3, s.front())) throw ConfigError("multi-line strings are not supported");
    return parse_quoted(s);
  }
  if (s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated array: " + std::string(s));
    return split_array(s.substr(1, s.size() - 2));
  }
  if (s == "true") return true;
  if (s == "false") return false;
  if (auto n = parse_number(s)) return *n;
  if (bare_strings) return std::string(s);
  throw ConfigError("cannot parse value: " + std::string(s));
}

ConfigDocument parse_config(std::string_view text, const std::string& source) {
  ConfigDocument doc;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    auto line = text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') throw ConfigError(where + "tables are not supported; use flat keys");
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const auto key = std::string(trim(line.substr(0, eq)));
    if (!valid_key(key)) throw ConfigError(where + "invalid key '" + key + "'");
    if (doc.count(key)) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      doc.emplace(key, parse_config_value(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return doc;
}

ConfigDocument read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::pair<std::string, ConfigValue> parse_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must look like key=value: " + assignment);
  const auto key = std::string(trim(std::string_view(assignment).substr(0, eq)));
  if (!valid_key(key)) throw ConfigError("invalid override key '" + key + "'");
  try {
    return {key, parse_config_value(std::string_view(assignment).substr(eq + 1), true)};
  } catch (const ConfigError& e) {
    throw ConfigError("override " + key + ": " + e.what());
  }
}

double as_double(const std::string& key, const ConfigValue& v) {
  if (auto d = std::get_if<double>(&v)) return *d;
  if (auto i = std::get_if<int64_t>(&v)) return static_cast<double>(*i);
  throw ConfigError("config key '" + key + "' must be a number");
}

int64_t as_int(const std::string& key, const ConfigValue& v) {
  if (auto i = std::get_if<int64_t>(&v)) return *i;
  if (auto d = std::get_if<double>(&v); d && std::floor(*d) == *d && std::abs(*d) < 9e15) return static_cast<int64_t>(*d);
  throw ConfigError("config key '" + key + "' must be an integer");
}

bool as_bool(const std::string& key, const ConfigValue& v) {
  if (auto b = std::get_if<bool>(&v)) return *b;
  throw ConfigError("config key '" + key + "' must be true or false");
}

std::string as_string(const std::string& key, const ConfigValue& v) {
  if (auto s = std::get_if<std::string>(&v)) return *s;
  throw ConfigError("config key '" + key + "' must be a string");
}

std::vector<std::string> as_string_list(const std::string& key, const ConfigValue& v) {
  if (auto l = std::get_if<std::vector<std::string>>(&v)) return *l;
  // a single bare word or comma-separated list is accepted from overrides
  if (auto s = std::get_if<std::string>(&v)) {
    std::vector<std::string> out;
    std::stringstream ss(*s);
    for (std::string item; std::getline(ss, item, ',');) {
      auto t = trim(item);
      if (!t.empty()) out.emplace_back(t);
    }
    return out;
  }
  throw ConfigError("config key '" + key + "' must be a list of strings");
}

std::string format_config_value(const ConfigValue& v) {
  struct Visitor {
    std::string operator()(bool b) const { return b ? "true" : "false"; }
    std::string operator()(int64_t i) const { return std::to_string(i); }
    std::string operator()(double d) const {
      auto s = format_number(d);
      if (s.find_first_of(".ein") == std::string::npos) s += ".0";
      return s;
    }
    std::string operator()(const std::string& s) const {
      std::string out = "\"";
      for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        if (c == '\n') {
          out += "\\n";
          continue;
        }
        out += c;
      }
      return out + "\"";
    }
    std::string operator()(const std::vector<std::string>& l) const {
      std::string out = "[";
      for (std::size_t i = 0; i < l.size(); ++i) {
        if (i) out += ", ";
        out += (*this)(l[i]);
      }
      return out + "]";
    }
  };
  return std::visit(Visitor{}, v);
}

}  // namespace nullswap
