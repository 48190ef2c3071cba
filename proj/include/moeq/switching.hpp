#pragma once

#include <cstdint>
#include <map>
#include <tuple>
#include <vector>

#include "moeq/channel_cache.hpp"
#include "moeq/clustering.hpp"
#include "moeq/quant.hpp"
#include "moeq/significance.hpp"

namespace moeq {

inline constexpr double kDefaultCacheFraction = 0.01;

// ceil(fraction * f), guarded against representation error in fraction.
std::uint32_t cache_entries_per_expert(std::uint32_t ffn_dim, double fraction = kDefaultCacheFraction);

// Selects, per (layer, expert), the channels with the highest cross-dataset
// dynamics score (ties -> lower channel index) and stores their reference
// values rounded to binary16. Throws InputError on shape mismatch.
ChannelCache build_cache(const MoEModel& model, const JointProfile& joint,
                         double fraction = kDefaultCacheFraction);

using ChannelKey = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>;  // layer, expert, channel

// Cached channels widened to reference precision, keyed by header. These are the
// authoritative values for requantization of those channels.
using ReplacedChannels = std::map<ChannelKey, std::vector<float>>;

// Throws ConsistencyError when an entry has no matching channel in qmodel.
ReplacedChannels replace_channels(const QuantizedModel& qmodel, const ChannelCache& cache);

struct ExpertSwitch {
  BitWidth old_width;
  BitWidth new_width;
  bool changed;
};

struct SwitchPlan {
  std::vector<std::vector<ExpertSwitch>> experts;  // [layer][expert]
  std::vector<LayerClustering> clustering;         // the new per-layer assignment

  std::size_t changed_count() const;
};

// Baseline widths of every expert in a quantized model.
WidthTable baseline_widths(const QuantizedModel& qmodel);

// Clusters new_profile's expert significance per layer and compares the
// resulting widths to the baseline.
SwitchPlan plan_switch(const WidthTable& baseline, const SignificanceProfile& new_profile,
                       const FcmParams& params, double boundary_delta,
                       Execution exec = Execution::parallel);

// Installs the plan: every changed expert gets its cached channels requantized
// from the cache to the new width as overrides; unchanged experts carry no
// overrides. Idempotent for a fixed plan. Throws ConsistencyError when the plan
// does not match qmodel or a changed expert has no cache entries.
QuantizedModel apply_switch(QuantizedModel qmodel, const ChannelCache& cache, const SwitchPlan& plan,
                            Execution exec = Execution::parallel);

}  // namespace moeq
