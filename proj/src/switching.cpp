#include "moeq/switching.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>

#include "moeq/error.hpp"
#include "moeq/float16.hpp"

namespace moeq {

std::uint32_t cache_entries_per_expert(std::uint32_t ffn_dim, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) throw ConfigError("cache fraction must be in (0, 1]");
  const double raw = fraction * static_cast<double>(ffn_dim);
  const auto n = static_cast<std::uint32_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::uint32_t>(n, 1u, ffn_dim);
}

ChannelCache build_cache(const MoEModel& model, const JointProfile& joint, double fraction) {
  const auto& cfg = model.config;
  cfg.validate_for_caching();
  const ChannelTensor& dyn = joint.dynamics;
  if (dyn.layers() != cfg.num_layers || dyn.experts() != cfg.experts_per_layer ||
      dyn.channels() != cfg.ffn_dim)
    throw InputError("build_cache: joint profile does not match the model shape");
  if (cfg.num_layers > 0xffffu || cfg.experts_per_layer > 0xffffu)
    throw ConfigError("build_cache: layer/expert indices exceed the 16-bit cache headers");

  const std::uint32_t keep = cache_entries_per_expert(cfg.ffn_dim, fraction);
  ChannelCache cache;
  std::vector<std::uint32_t> order(cfg.ffn_dim);
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
    for (std::uint32_t e = 0; e < cfg.experts_per_layer; ++e) {
      const auto scores = dyn.expert(l, e);
      std::iota(order.begin(), order.end(), 0u);
      std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                        [&](std::uint32_t a, std::uint32_t b) {
                          return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                        });
      std::vector<std::uint32_t> chosen(order.begin(), order.begin() + keep);
      std::sort(chosen.begin(), chosen.end());
      for (std::uint32_t ch : chosen) {
        const auto values = channel_values(model.layers[l].experts[e], ch);
        ChannelCacheEntry entry{static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(e), ch, {}};
        entry.values.reserve(values.size());
        for (float v : values) entry.values.push_back(float_to_half(v));
        cache.insert(std::move(entry));
      }
    }
  }
  return cache;
}

ReplacedChannels replace_channels(const QuantizedModel& qmodel, const ChannelCache& cache) {
  const auto& cfg = qmodel.config;
  ReplacedChannels out;
  for (const auto& entry : cache.entries()) {
    if (entry.layer >= cfg.num_layers || entry.expert >= cfg.experts_per_layer ||
        entry.channel >= cfg.ffn_dim)
      throw ConsistencyError("replace_channels: cache entry (" + std::to_string(entry.layer) + ", " +
                             std::to_string(entry.expert) + ", " + std::to_string(entry.channel) +
                             ") has no matching channel in the quantized model");
    if (entry.values.size() != 2ull * cfg.hidden_dim)
      throw ConsistencyError("replace_channels: cache entry width does not match hidden_dim");
    out.emplace(ChannelKey{entry.layer, entry.expert, entry.channel}, entry.widened());
  }
  return out;
}

std::size_t SwitchPlan::changed_count() const {
  std::size_t n = 0;
  for (const auto& layer : experts)
    for (const auto& e : layer) n += e.changed ? 1 : 0;
  return n;
}

WidthTable baseline_widths(const QuantizedModel& qmodel) {
  WidthTable t(qmodel.experts.size());
  for (std::size_t l = 0; l < qmodel.experts.size(); ++l)
    for (const auto& e : qmodel.experts[l]) t[l].push_back(e.baseline);
  return t;
}

SwitchPlan plan_switch(const WidthTable& baseline, const SignificanceProfile& new_profile,
                       const FcmParams& params, double boundary_delta, Execution exec) {
  if (new_profile.expert.size() != baseline.size())
    throw InputError("plan_switch: profile and baseline cover different layer counts");
  for (std::size_t l = 0; l < baseline.size(); ++l)
    if (new_profile.expert[l].size() != baseline[l].size())
      throw InputError("plan_switch: profile and baseline cover different expert counts");

  SwitchPlan plan;
  plan.clustering = cluster_layers(new_profile.expert, new_profile.token_share, params,
                                   boundary_delta, exec);
  plan.experts.resize(baseline.size());
  for (std::size_t l = 0; l < baseline.size(); ++l) {
    for (std::size_t e = 0; e < baseline[l].size(); ++e) {
      const BitWidth next = plan.clustering[l].assignment.widths[e];
      plan.experts[l].push_back({baseline[l][e], next, next != baseline[l][e]});
    }
  }
  return plan;
}

QuantizedModel apply_switch(QuantizedModel qmodel, const ChannelCache& cache, const SwitchPlan& plan,
                            Execution exec) {
  const auto& cfg = qmodel.config;
  if (plan.experts.size() != cfg.num_layers) throw ConsistencyError("apply_switch: plan layer count");
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (plan.experts[l].size() != cfg.experts_per_layer)
      throw ConsistencyError("apply_switch: plan expert count");
    for (std::size_t e = 0; e < cfg.experts_per_layer; ++e)
      if (plan.experts[l][e].old_width != qmodel.experts[l][e].baseline)
        throw ConsistencyError("apply_switch: plan baseline for layer " + std::to_string(l) +
                               " expert " + std::to_string(e) + " differs from the model");
  }
  const ReplacedChannels replaced = replace_channels(qmodel, cache);

  std::exception_ptr failure;
  const auto run = [&](std::int64_t job) {
    const auto l = static_cast<std::uint32_t>(job / cfg.experts_per_layer);
    const auto e = static_cast<std::uint32_t>(job % cfg.experts_per_layer);
    const ExpertSwitch& sw = plan.experts[l][e];
    QuantizedExpert& expert = qmodel.experts[l][e];
    try {
      if (!sw.changed) {
        expert.overrides.clear();
        return;
      }
      const auto entries = cache.entries_for(l, e);
      if (entries.empty())
        throw ConsistencyError("apply_switch: no cached channels for changed expert (layer " +
                               std::to_string(l) + ", expert " + std::to_string(e) + ")");
      std::map<std::uint32_t, QuantizedChannel> overrides;
      for (std::size_t idx : entries) {
        const auto& entry = cache.entries()[idx];
        const auto& values = replaced.at(ChannelKey{l, e, entry.channel});
        overrides.emplace(entry.channel, quantize_values(values, sw.new_width));
      }
      expert.overrides = std::move(overrides);
    } catch (...) {
#pragma omp critical(moeq_switch_failure)
      if (!failure) failure = std::current_exception();
    }
  };
  const auto jobs = static_cast<std::int64_t>(cfg.num_layers) * cfg.experts_per_layer;
  if (exec == Execution::serial) {
    for (std::int64_t j = 0; j < jobs; ++j) run(j);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t j = 0; j < jobs; ++j) run(j);
  }
  if (failure) std::rethrow_exception(failure);
  return qmodel;
}

}  // namespace moeq
