#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeq/moe.hpp"

namespace moeq {

// Dense (layer, expert, channel) array of doubles.
class ChannelTensor {
 public:
  ChannelTensor() = default;
  ChannelTensor(std::uint32_t layers, std::uint32_t experts, std::uint32_t channels)
      : layers_(layers), experts_(experts), channels_(channels),
        values_(static_cast<std::size_t>(layers) * experts * channels, 0.0) {}

  std::uint32_t layers() const noexcept { return layers_; }
  std::uint32_t experts() const noexcept { return experts_; }
  std::uint32_t channels() const noexcept { return channels_; }

  double& at(std::uint32_t l, std::uint32_t e, std::uint32_t c) noexcept {
    return values_[(static_cast<std::size_t>(l) * experts_ + e) * channels_ + c];
  }
  double at(std::uint32_t l, std::uint32_t e, std::uint32_t c) const noexcept {
    return values_[(static_cast<std::size_t>(l) * experts_ + e) * channels_ + c];
  }
  std::span<double> expert(std::uint32_t l, std::uint32_t e) noexcept {
    return {values_.data() + (static_cast<std::size_t>(l) * experts_ + e) * channels_, channels_};
  }
  std::span<const double> expert(std::uint32_t l, std::uint32_t e) const noexcept {
    return {values_.data() + (static_cast<std::size_t>(l) * experts_ + e) * channels_, channels_};
  }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  bool same_shape(const ChannelTensor& o) const noexcept {
    return layers_ == o.layers_ && experts_ == o.experts_ && channels_ == o.channels_;
  }
  bool operator==(const ChannelTensor&) const = default;

 private:
  std::uint32_t layers_ = 0;
  std::uint32_t experts_ = 0;
  std::uint32_t channels_ = 0;
  std::vector<double> values_;
};

using LayerExpertTable = std::vector<std::vector<double>>;  // [layer][expert]

struct TokenCount {
  std::uint32_t token;
  std::uint64_t occurrences;
  std::uint64_t dispatches;
};

struct TokenUtilization {
  std::vector<TokenCount> counts;     // ascending token id
  std::vector<std::uint32_t> ranking;  // dispatches descending, token id ascending

  const TokenCount* find(std::uint32_t token) const;
};

TokenUtilization token_utilization(const TokenStream& stream, const RoutingRecord& routing);

// Fraction of dispatches landing on each expert, per layer.
LayerExpertTable token_shares(const RoutingRecord& routing, std::uint32_t experts_per_layer);

// S_ch(l, e, c): sum over positions routed to e of gate * |channel output|,
// accumulated through the forward observer in fixed block order.
ChannelTensor channel_significance(const MoEModel& model, const TokenStream& stream,
                                   Execution exec = Execution::parallel);

struct ExpertSignificance {
  LayerExpertTable values;                 // per layer sums to 1
  std::vector<std::uint32_t> empty_layers;  // layers with zero mass, set to uniform 1/N
};

// Per-layer share of channel significance mass held by each expert.
ExpertSignificance expert_significance(const ChannelTensor& channel_sig);

struct SignificanceProfile {
  std::string dataset;
  std::uint64_t token_count = 0;
  ChannelTensor channel;         // S_ch
  LayerExpertTable expert;       // S_exp
  LayerExpertTable token_share;  // dispatch share per expert
  std::vector<std::uint32_t> empty_layers;
};

// Runs the forward pass once with the observer and derives all profile fields.
SignificanceProfile analyze(const MoEModel& model, const TokenStream& stream,
                            Execution exec = Execution::parallel);
// Same, over dequantized expert weights (no reference model available).
SignificanceProfile analyze_with_experts(const MoEConfig& config, const Matrix& embeddings,
                                         std::span<const Matrix> routers,
                                         const std::vector<std::vector<ExpertWeights>>& experts,
                                         const TokenStream& stream,
                                         Execution exec = Execution::parallel);

struct JointProfile {
  std::vector<std::string> datasets;
  std::vector<double> weights;                          // normalized, sum 1
  LayerExpertTable synthesized;                         // x_j per layer, sums to 1
  std::vector<std::vector<std::vector<double>>> per_dataset;  // [layer][expert][dataset] S_exp
  LayerExpertTable token_share;                         // weighted mean of dataset shares
  ChannelTensor dynamics;                               // cross-dataset variance

  // The synthesized values viewed as a single profile ("joint"), for clustering.
  SignificanceProfile as_profile() const;
};

// weights default to dataset token counts. Throws InputError on shape mismatch,
// negative weights, or all-zero weights.
JointProfile synthesize_joint(std::span<const SignificanceProfile> profiles,
                              std::optional<std::vector<double>> weights = std::nullopt);

}  // namespace moeq
