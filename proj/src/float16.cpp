#include "moeq/float16.hpp"

#include <bit>
#include <cmath>

namespace moeq {

std::uint16_t float_to_half(float value) noexcept {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t abs = bits & 0x7fffffffu;

  if (abs >= 0x7f800000u) {  // inf or nan
    if (abs == 0x7f800000u) return sign | 0x7c00u;
    return sign | 0x7e00u | static_cast<std::uint16_t>((abs >> 13) & 0x3ffu);
  }
  // 65520 = largest value that still rounds down to 65504.
  if (abs >= 0x477ff000u) return sign | 0x7c00u;

  if (abs < 0x38800000u) {  // below the smallest normal half (2^-14)
    // Subnormal half: value / 2^-24, rounded to nearest even.
    const std::uint32_t mantissa = (abs & 0x7fffffu) | 0x800000u;
    const int exponent = static_cast<int>(abs >> 23);
    const int shift = 126 - exponent;  // float exponent e -> shift so result unit is 2^-24
    if (shift > 24) return sign;
    const std::uint32_t shifted = mantissa >> shift;
    const std::uint32_t rest = mantissa & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    std::uint32_t result = shifted;
    if (rest > halfway || (rest == halfway && (shifted & 1u))) ++result;
    return sign | static_cast<std::uint16_t>(result);
  }

  // Normal: rebias exponent (127 -> 15) and round 23-bit mantissa to 10 bits.
  std::uint32_t result = ((abs - 0x38000000u) >> 13);
  const std::uint32_t rest = abs & 0x1fffu;
  if (rest > 0x1000u || (rest == 0x1000u && (result & 1u))) ++result;  // may carry into exponent
  return sign | static_cast<std::uint16_t>(result);
}

float half_to_float(std::uint16_t bits) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exponent = (bits >> 10) & 0x1fu;
  const std::uint32_t mantissa = bits & 0x3ffu;
  if (exponent == 0) {
    const float magnitude = std::ldexp(static_cast<float>(mantissa), -24);
    return sign ? -magnitude : magnitude;
  }
  if (exponent == 0x1f) return std::bit_cast<float>(sign | 0x7f800000u | (mantissa << 13));
  return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

}  // namespace moeq
