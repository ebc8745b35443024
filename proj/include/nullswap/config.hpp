#pragma once

// Flat TOML subset used by config files and --override flags:
//
//   # comment
//   key = "string" | 'string' | 12 | 1e-4 | true | ["a", "b"] | [1, 2]
//
// Tables, dotted keys, multi-line strings and dates are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace nullswap {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ConfigValue = std::variant<bool, int64_t, double, std::string, std::vector<std::string>>;
using ConfigDocument = std::map<std::string, ConfigValue>;

ConfigDocument parse_config(std::string_view text, const std::string& source = "<config>");
ConfigDocument read_config_file(const std::filesystem::path& path);

/// Parses one value. With `bare_strings`, an unquoted token that is not a
/// number or boolean is taken as a string (used for command-line overrides).
ConfigValue parse_config_value(std::string_view text, bool bare_strings = false);

/// "key=value" -> (key, value) with bare strings allowed.
std::pair<std::string, ConfigValue> parse_override(const std::string& assignment);

// Typed accessors; throw ConfigError naming the key on a type mismatch.
// An integer is accepted where a double is expected.
double as_double(const std::string& key, const ConfigValue& v);
int64_t as_int(const std::string& key, const ConfigValue& v);
bool as_bool(const std::string& key, const ConfigValue& v);
std::string as_string(const std::string& key, const ConfigValue& v);
std::vector<std::string> as_string_list(const std::string& key, const ConfigValue& v);

std::string format_config_value(const ConfigValue& v);

}  // namespace nullswap
