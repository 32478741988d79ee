#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace tcdsr {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::string_view data);
std::string to_hex(const Digest& d);
inline std::string sha256_hex(std::string_view data) { return to_hex(sha256(data)); }

}  // namespace tcdsr
