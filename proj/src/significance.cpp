#include "moeq/significance.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>

#include "moeq/error.hpp"

namespace moeq {

const TokenCount* TokenUtilization::find(std::uint32_t token) const {
  const auto it = std::lower_bound(counts.begin(), counts.end(), token,
                                   [](const TokenCount& c, std::uint32_t t) { return c.token < t; });
  return it != counts.end() && it->token == token ? &*it : nullptr;
}

TokenUtilization token_utilization(const TokenStream& stream, const RoutingRecord& routing) {
  if (routing.positions() != stream.size())
    throw InputError("token_utilization: routing covers " + std::to_string(routing.positions()) +
                     " positions, stream has " + std::to_string(stream.size()));
  std::map<std::uint32_t, std::uint64_t> occurrences;
  for (std::uint32_t t : stream.tokens) ++occurrences[t];
  // Every routed position dispatches to K experts in each layer.
  const std::uint64_t per_occurrence =
      static_cast<std::uint64_t>(routing.top_k()) * routing.num_layers();

  TokenUtilization out;
  out.counts.reserve(occurrences.size());
  for (const auto& [token, n] : occurrences) out.counts.push_back({token, n, n * per_occurrence});
  out.ranking.reserve(out.counts.size());
  for (const auto& c : out.counts) out.ranking.push_back(c.token);
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](std::uint32_t a, std::uint32_t b) {
    return out.find(a)->dispatches > out.find(b)->dispatches;
  });
  return out;
}

LayerExpertTable token_shares(const RoutingRecord& routing, std::uint32_t experts_per_layer) {
  LayerExpertTable shares(routing.num_layers(), std::vector<double>(experts_per_layer, 0.0));
  const double total = static_cast<double>(routing.positions()) * routing.top_k();
  for (std::uint32_t l = 0; l < routing.num_layers(); ++l) {
    for (std::size_t p = 0; p < routing.positions(); ++p)
      for (std::uint32_t e : routing.experts(l, p)) shares[l][e] += 1.0;
    if (total > 0.0)
      for (double& s : shares[l]) s /= total;
  }
  return shares;
}

namespace {

// Accumulates observer events into one tensor per token block, then merges the
// blocks in index order so the result does not depend on thread scheduling.
class BlockAccumulator {
 public:
  BlockAccumulator(const MoEConfig& cfg, std::size_t positions)
      : cfg_(cfg), blocks_((positions + kTokenBlock - 1) / kTokenBlock) {}

  ChannelObserver observer() {
    return [this](const ChannelEvent& ev) {
      auto& block = blocks_[ev.position / kTokenBlock];
      if (!block)
        block = std::make_unique<ChannelTensor>(cfg_.num_layers, cfg_.experts_per_layer, cfg_.ffn_dim);
      block->at(ev.layer, ev.expert, ev.channel) += ev.magnitude;
    };
  }

  ChannelTensor merge() {
    ChannelTensor total(cfg_.num_layers, cfg_.experts_per_layer, cfg_.ffn_dim);
    auto out = total.values();
    for (auto& block : blocks_) {
      if (!block) continue;
      const auto in = block->values();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
      block.reset();
    }
    return total;
  }

 private:
  const MoEConfig& cfg_;
  std::vector<std::unique_ptr<ChannelTensor>> blocks_;
};

SignificanceProfile finish_profile(const std::string& name, std::size_t tokens, ChannelTensor channel,
                                   const RoutingRecord& routing, std::uint32_t experts) {
  SignificanceProfile p;
  p.dataset = name;
  p.token_count = tokens;
  auto expert = expert_significance(channel);
  p.channel = std::move(channel);
  p.expert = std::move(expert.values);
  p.empty_layers = std::move(expert.empty_layers);
  p.token_share = token_shares(routing, experts);
  return p;
}

}  // namespace

ChannelTensor channel_significance(const MoEModel& model, const TokenStream& stream, Execution exec) {
  BlockAccumulator acc(model.config, stream.size());
  const ChannelObserver obs = acc.observer();
  forward(model, stream, &obs, exec);
  return acc.merge();
}

ExpertSignificance expert_significance(const ChannelTensor& channel_sig) {
  ExpertSignificance out;
  const std::uint32_t n = channel_sig.experts();
  out.values.assign(channel_sig.layers(), std::vector<double>(n, 0.0));
  for (std::uint32_t l = 0; l < channel_sig.layers(); ++l) {
    double layer_total = 0.0;
    for (std::uint32_t e = 0; e < n; ++e) {
      double sum = 0.0;
      for (double v : channel_sig.expert(l, e)) {
        if (!(v >= 0.0) || !std::isfinite(v))
          throw InputError("expert_significance: channel significance must be finite and >= 0");
        sum += v;
      }
      out.values[l][e] = sum;
      layer_total += sum;
    }
    if (layer_total > 0.0) {
      for (double& v : out.values[l]) v /= layer_total;
    } else {
      out.empty_layers.push_back(l);
      std::fill(out.values[l].begin(), out.values[l].end(), 1.0 / n);
    }
  }
  return out;
}

SignificanceProfile analyze(const MoEModel& model, const TokenStream& stream, Execution exec) {
  BlockAccumulator acc(model.config, stream.size());
  const ChannelObserver obs = acc.observer();
  const auto result = forward(model, stream, &obs, exec);
  return finish_profile(stream.name, stream.size(), acc.merge(), result.routing,
                        model.config.experts_per_layer);
}

SignificanceProfile analyze_with_experts(const MoEConfig& config, const Matrix& embeddings,
                                         std::span<const Matrix> routers,
                                         const std::vector<std::vector<ExpertWeights>>& experts,
                                         const TokenStream& stream, Execution exec) {
  const auto routing = route(config, embeddings, routers, stream, exec);
  BlockAccumulator acc(config, stream.size());
  const ChannelObserver obs = acc.observer();
  forward_with_experts(config, embeddings, routing, experts, stream, &obs, exec);
  return finish_profile(stream.name, stream.size(), acc.merge(), routing, config.experts_per_layer);
}

SignificanceProfile JointProfile::as_profile() const {
  SignificanceProfile p;
  p.dataset = "joint";
  p.expert = synthesized;
  p.token_share = token_share;
  return p;
}

JointProfile synthesize_joint(std::span<const SignificanceProfile> profiles,
                              std::optional<std::vector<double>> weights) {
  if (profiles.empty()) throw InputError("synthesize_joint: no profiles");
  const auto& first = profiles.front();
  for (const auto& p : profiles) {
    if (!p.channel.same_shape(first.channel) || p.expert.size() != first.expert.size() ||
        p.token_share.size() != first.token_share.size())
      throw InputError("synthesize_joint: profile '" + p.dataset + "' has a different model shape");
    for (std::size_t l = 0; l < p.expert.size(); ++l)
      if (p.expert[l].size() != first.expert[l].size() ||
          p.token_share[l].size() != first.token_share[l].size())
        throw InputError("synthesize_joint: profile '" + p.dataset + "' has a different model shape");
  }

  std::vector<double> w;
  if (weights) {
    if (weights->size() != profiles.size())
      throw InputError("synthesize_joint: one weight per profile required");
    w = *weights;
  } else {
    for (const auto& p : profiles) w.push_back(static_cast<double>(p.token_count));
  }
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("synthesize_joint: weights must be >= 0");
    total += v;
  }
  if (total <= 0.0) throw InputError("synthesize_joint: weights are all zero");
  for (double& v : w) v /= total;

  const std::size_t layers = first.expert.size();
  const std::size_t n = layers > 0 ? first.expert[0].size() : 0;
  JointProfile joint;
  joint.weights = w;
  for (const auto& p : profiles) joint.datasets.push_back(p.dataset);
  joint.synthesized.assign(layers, std::vector<double>(n, 0.0));
  joint.token_share.assign(layers, std::vector<double>(n, 0.0));
  joint.per_dataset.assign(layers, std::vector<std::vector<double>>(n, std::vector<double>(profiles.size())));
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t e = 0; e < n; ++e) {
      for (std::size_t d = 0; d < profiles.size(); ++d) {
        joint.per_dataset[l][e][d] = profiles[d].expert[l][e];
        joint.synthesized[l][e] += w[d] * profiles[d].expert[l][e];
        joint.token_share[l][e] += w[d] * profiles[d].token_share[l][e];
      }
    }
  }

  // Dynamics: weighted variance of each channel's share of its layer's mass.
  const ChannelTensor& shape = first.channel;
  joint.dynamics = ChannelTensor(shape.layers(), shape.experts(), shape.channels());
  std::vector<std::vector<double>> layer_mass(profiles.size(), std::vector<double>(shape.layers(), 0.0));
  for (std::size_t d = 0; d < profiles.size(); ++d)
    for (std::uint32_t l = 0; l < shape.layers(); ++l)
      for (std::uint32_t e = 0; e < shape.experts(); ++e)
        for (double v : profiles[d].channel.expert(l, e)) layer_mass[d][l] += v;

  std::vector<double> share(profiles.size());
  for (std::uint32_t l = 0; l < shape.layers(); ++l) {
    for (std::uint32_t e = 0; e < shape.experts(); ++e) {
      for (std::uint32_t c = 0; c < shape.channels(); ++c) {
        double mean = 0.0;
        for (std::size_t d = 0; d < profiles.size(); ++d) {
          share[d] = layer_mass[d][l] > 0.0 ? profiles[d].channel.at(l, e, c) / layer_mass[d][l] : 0.0;
          mean += w[d] * share[d];
        }
        double var = 0.0;
        for (std::size_t d = 0; d < profiles.size(); ++d) var += w[d] * (share[d] - mean) * (share[d] - mean);
        joint.dynamics.at(l, e, c) = var;
      }
    }
  }
  return joint;
}

}  // namespace moeq
