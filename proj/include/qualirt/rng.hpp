#pragma once

#include <cstdint>
#include <string_view>

namespace qualirt {

// SplitMix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  return mix64(root ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// FNV-1a over the name, then mixed with the root.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(root, h);
}

}  // namespace qualirt
