#pragma once

#include <cstdint>

namespace moeq {

// IEEE-754 binary16 conversion. float_to_half rounds to nearest, ties to even,
// with overflow to infinity and gradual underflow to subnormals.
std::uint16_t float_to_half(float value) noexcept;
float half_to_float(std::uint16_t bits) noexcept;

// Value after a binary16 round trip.
inline float round_to_half(float value) noexcept { return half_to_float(float_to_half(value)); }

}  // namespace moeq
