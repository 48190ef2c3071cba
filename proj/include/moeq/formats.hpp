#pragma once

// On-disk formats. All multi-byte values are little-endian.
//
// DMOE v1 (reference model):
//   "DMOE" | u8 version=1 | u32 num_layers, N, d, f, K, vocab_size
//   | f32 embeddings[vocab][d] | per layer: f32 router[N][d]
//   | per layer, per expert: f32 w_in[f][d], f32 w_out[d][f]
//
// DMQZ v1 (quantized model):
//   "DMQZ" | u8 version=1 | DMOE config block | f32 embeddings | f32 routers
//   | per layer, per expert:
//       u8 baseline bits | f32 scale[f] | u32 words[f][words_per_channel]
//       | u32 override count | per override: u32 channel, u8 bits, f32 scale, u32 words[..]
//   | u8 has_cache | if 1: u32 entry count | per entry: u16 layer, u16 expert,
//       u32 channel, binary16 values[2d] (w_in row then w_out column)
//
// Each channel packs w_in row r followed by w_out column r (2d lanes).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moeq/moe.hpp"
#include "moeq/quant.hpp"

namespace moeq {

std::vector<std::uint8_t> encode_model(const MoEModel& model);
// Throws FormatError on bad magic, version, truncation, or trailing bytes.
MoEModel decode_model(std::span<const std::uint8_t> bytes);

// Byte range of one named DMQZ section.
struct Section {
  std::string name;
  std::size_t offset;
  std::size_t size;
};

std::vector<std::uint8_t> encode_qmodel(const QuantizedModel& qmodel,
                                        std::vector<Section>* sections = nullptr);
QuantizedModel decode_qmodel(std::span<const std::uint8_t> bytes);

// Token files: little-endian u32 ids, or "TXT1" followed by newline-separated
// decimal ids.
TokenStream decode_tokens(std::span<const std::uint8_t> bytes, std::string name);
std::vector<std::uint8_t> encode_tokens(const TokenStream& stream, bool text = false);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a temporary sibling, then renames over the destination.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

MoEModel load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const MoEModel& model);
QuantizedModel load_qmodel(const std::filesystem::path& path);
void save_qmodel(const std::filesystem::path& path, const QuantizedModel& qmodel);
TokenStream load_tokens(const std::filesystem::path& path);
void save_tokens(const std::filesystem::path& path, const TokenStream& stream, bool text = false);

}  // namespace moeq
