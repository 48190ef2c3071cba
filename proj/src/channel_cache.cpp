#include "moeq/channel_cache.hpp"

#include <algorithm>
#include <string>

#include "moeq/error.hpp"
#include "moeq/float16.hpp"

namespace moeq {

std::vector<float> ChannelCacheEntry::widened() const {
  std::vector<float> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), half_to_float);
  return out;
}

void ChannelCache::insert(ChannelCacheEntry entry) {
  auto& per_expert = index_[key(entry.layer, entry.expert)];
  if (per_expert.contains(entry.channel))
    throw ConsistencyError("channel cache: duplicate entry (layer " + std::to_string(entry.layer) +
                           ", expert " + std::to_string(entry.expert) + ", channel " +
                           std::to_string(entry.channel) + ")");
  per_expert.emplace(entry.channel, entries_.size());
  byte_size_ += entry.byte_size();
  entries_.push_back(std::move(entry));
}

const ChannelCacheEntry* ChannelCache::find(std::uint32_t layer, std::uint32_t expert,
                                            std::uint32_t channel) const {
  const auto it = index_.find(key(layer, expert));
  if (it == index_.end()) return nullptr;
  const auto ch = it->second.find(channel);
  return ch == it->second.end() ? nullptr : &entries_[ch->second];
}

std::vector<std::size_t> ChannelCache::entries_for(std::uint32_t layer, std::uint32_t expert) const {
  std::vector<std::size_t> out;
  const auto it = index_.find(key(layer, expert));
  if (it == index_.end()) return out;
  for (const auto& [channel, idx] : it->second) out.push_back(idx);
  std::sort(out.begin(), out.end(),
            [&](std::size_t a, std::size_t b) { return entries_[a].channel < entries_[b].channel; });
  return out;
}

}  // namespace moeq
