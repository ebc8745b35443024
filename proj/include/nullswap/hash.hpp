#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace nullswap {

// 64-bit FNV-1a; stable across platforms, used for split assignment and file naming.
constexpr std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex_digest(std::uint64_t h, int digits = 16) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf + (16 - digits));
}

}  // namespace nullswap
