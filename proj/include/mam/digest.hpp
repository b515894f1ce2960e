// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace mam {

/// 64-bit FNV-1a. Used to fingerprint artifacts in metadata and manifests, not for security.
class Fnv1a64 {
 public:
  void update(std::span<const std::byte> bytes) {
    for (auto b : bytes) {
      hash_ ^= static_cast<std::uint64_t>(b);
      hash_ *= 0x100000001B3ULL;
    }
  }
  void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }

  std::uint64_t value() const { return hash_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
    return std::string(buf, 16);
  }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

inline std::string digest_hex(std::string_view bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.hex();
}

}  // namespace mam
