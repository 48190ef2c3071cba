#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

namespace moeq {

// A cached channel: w_in row then w_out column, stored as binary16 bit patterns.
struct ChannelCacheEntry {
  std::uint16_t layer = 0;
  std::uint16_t expert = 0;
  std::uint32_t channel = 0;
  std::vector<std::uint16_t> values;  // 2d binary16 values

  // layer u16 + expert u16 + channel u32
  static constexpr std::uint64_t kHeaderBytes = 8;

  std::uint64_t byte_size() const noexcept { return kHeaderBytes + 2 * values.size(); }
  // Values widened to 32-bit floats.
  std::vector<float> widened() const;

  bool operator==(const ChannelCacheEntry&) const = default;
};

// Channel store keyed by (layer, expert, channel) headers.
class ChannelCache {
 public:
  ChannelCache() = default;

  // Throws ConsistencyError on duplicate headers.
  void insert(ChannelCacheEntry entry);

  const std::vector<ChannelCacheEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  const ChannelCacheEntry* find(std::uint32_t layer, std::uint32_t expert,
                                std::uint32_t channel) const;
  // Indices into entries() for one expert, ordered by channel.
  std::vector<std::size_t> entries_for(std::uint32_t layer, std::uint32_t expert) const;

  std::uint64_t byte_size() const noexcept { return byte_size_; }

  bool operator==(const ChannelCache& other) const { return entries_ == other.entries_; }

 private:
  static std::uint64_t key(std::uint32_t layer, std::uint32_t expert) noexcept {
    return (static_cast<std::uint64_t>(layer) << 32) | expert;
  }

  std::vector<ChannelCacheEntry> entries_;
  // (layer, expert) -> channel -> entry index
  std::unordered_map<std::uint64_t, std::unordered_map<std::uint32_t, std::size_t>> index_;
  std::uint64_t byte_size_ = 0;
};

}  // namespace moeq
