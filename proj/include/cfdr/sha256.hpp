#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cfdr {

std::string sha256_hex(const uint8_t* data, size_t len);
std::string sha256_hex(const std::vector<uint8_t>& data);
std::string sha256_hex(const std::string& data);

}  // namespace cfdr
