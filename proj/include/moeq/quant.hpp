#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "moeq/channel_cache.hpp"
#include "moeq/matrix.hpp"
#include "moeq/moe.hpp"

namespace moeq {

// Integer weight format: INT2, INT4, INT6 or INT8.
class BitWidth {
 public:
  // Throws InputError for anything but 2, 4, 6, 8.
  static BitWidth from_bits(int bits);

  static constexpr BitWidth int2() noexcept { return BitWidth(2); }
  static constexpr BitWidth int4() noexcept { return BitWidth(4); }
  static constexpr BitWidth int6() noexcept { return BitWidth(6); }
  static constexpr BitWidth int8() noexcept { return BitWidth(8); }

  constexpr int bits() const noexcept { return bits_; }
  // Largest code magnitude; codes live in [-max_code, max_code].
  constexpr std::int32_t max_code() const noexcept { return (1 << (bits_ - 1)) - 1; }
  constexpr std::uint32_t offset() const noexcept { return 1u << (bits_ - 1); }
  // 16, 8, 5, 4. Six-bit words hold five lanes and two zero pad bits.
  constexpr std::uint32_t lanes_per_word() const noexcept { return bits_ == 6 ? 5u : 32u / bits_; }
  constexpr std::size_t words_for(std::size_t lanes) const noexcept {
    return (lanes + lanes_per_word() - 1) / lanes_per_word();
  }

  constexpr auto operator<=>(const BitWidth&) const = default;

 private:
  constexpr explicit BitWidth(int bits) noexcept : bits_(static_cast<std::uint8_t>(bits)) {}
  std::uint8_t bits_;
};

inline constexpr BitWidth kAllWidths[] = {BitWidth::int2(), BitWidth::int4(), BitWidth::int6(),
                                          BitWidth::int8()};

struct ChannelCodec {
  BitWidth width = BitWidth::int8();
  float scale = 1.0f;  // > 0, finite

  bool operator==(const ChannelCodec&) const = default;
};

struct PackedRow {
  BitWidth width = BitWidth::int8();
  std::uint32_t lane_count = 0;
  std::vector<std::uint32_t> words;

  bool operator==(const PackedRow&) const = default;
};

// scale = max|v| / max_code, or 1 for an all-zero vector.
ChannelCodec fit_codec(std::span<const float> values, BitWidth width);

// code = clamp(round_half_even(v * (1/scale)), -max_code, max_code).
std::vector<std::int32_t> quantize_channel(std::span<const float> values, const ChannelCodec& codec);

std::vector<float> dequantize_channel(std::span<const std::int32_t> codes, const ChannelCodec& codec);

// Offset-binary lanes, lane j of a word at bits [j*b, (j+1)*b).
PackedRow pack_row(std::span<const std::int32_t> codes, BitWidth width);
std::vector<std::int32_t> unpack_row(const PackedRow& row);

// One quantized channel: w_in row r followed by w_out column r (2d lanes).
struct QuantizedChannel {
  ChannelCodec codec;
  PackedRow row;

  BitWidth width() const noexcept { return codec.width; }
  bool operator==(const QuantizedChannel&) const = default;
};

// Concatenates w_in row r and w_out column r.
std::vector<float> channel_values(const ExpertWeights& expert, std::size_t channel);

QuantizedChannel quantize_values(std::span<const float> values, BitWidth width);
std::vector<float> dequantize(const QuantizedChannel& channel);

struct QuantizedExpert {
  BitWidth baseline = BitWidth::int8();
  std::vector<QuantizedChannel> channels;              // baseline codes, one per channel
  std::map<std::uint32_t, QuantizedChannel> overrides;  // channel -> installed override

  // Override if present, otherwise the baseline channel.
  const QuantizedChannel& effective(std::uint32_t channel) const;

  bool operator==(const QuantizedExpert&) const = default;
};

QuantizedExpert quantize_expert(const ExpertWeights& expert, BitWidth width);

// Reference-precision weights honoring overrides. Throws FormatError on
// malformed packed rows.
ExpertWeights dequantize_expert(const QuantizedExpert& expert, std::size_t hidden_dim);

struct QuantizedModel {
  MoEConfig config;
  Matrix embeddings;
  std::vector<Matrix> routers;                        // [layer], N x d
  std::vector<std::vector<QuantizedExpert>> experts;  // [layer][expert]
  std::optional<ChannelCache> cache;

  // Throws ConfigError on shape disagreement, FormatError on malformed rows.
  void validate() const;

  // (payload bits + scale bits) / weight count over every expert weight.
  double average_bits() const;
  // Bytes of packed words plus scales over all experts.
  std::uint64_t payload_bytes() const;

  bool operator==(const QuantizedModel&) const = default;
};

// widths[layer][expert]
using WidthTable = std::vector<std::vector<BitWidth>>;

QuantizedModel quantize_model(const MoEModel& model, const WidthTable& widths,
                              Execution exec = Execution::parallel);
QuantizedModel quantize_uniform(const MoEModel& model, BitWidth width,
                                Execution exec = Execution::parallel);

std::vector<std::vector<ExpertWeights>> dequantize_model(const QuantizedModel& qmodel,
                                                         Execution exec = Execution::parallel);

// Routing uses the reference-precision router; experts are dequantized first.
Matrix forward_quantized(const QuantizedModel& qmodel, const TokenStream& stream,
                         Execution exec = Execution::parallel);
RoutingRecord route_quantized(const QuantizedModel& qmodel, const TokenStream& stream,
                              Execution exec = Execution::parallel);

// Bytes one expert channel occupies in packed form (words plus one scale).
std::uint64_t channel_bytes(const QuantizedChannel& channel);

}  // namespace moeq
