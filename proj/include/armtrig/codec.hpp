#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace armtrig::codec {

std::string base64_encode(std::span<const unsigned char> bytes);
/// Throws armtrig::Error on malformed input.
std::vector<unsigned char> base64_decode(std::string_view text);

/// Little-endian IEEE-754 binary32, independent of host byte order.
std::string encode_f32(std::span<const float> values);
std::vector<float> decode_f32(std::string_view text);

}  // namespace armtrig::codec
