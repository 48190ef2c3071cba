#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moeq/moe.hpp"

namespace moeq {

// Token groups are contiguous, equal-as-possible slices of the vocabulary.
// Each group has an affinity in [0, 1] for every expert; a token of group g is
// dispatched to expert j with inclusion probability proportional to
// exp(concentration * affinity[g][j]), capped so that K experts are chosen per
// token. Affinities refer to layer-0 expert ids; every other layer applies a
// seeded permutation of the experts.
struct SyntheticSpec {
  std::uint64_t seed = 42;
  MoEConfig config;
  std::uint32_t groups = 2;
  double concentration = 0.0;
  std::vector<std::vector<double>> affinity;  // [group][expert]
  std::uint32_t stream_length = 4096;

  float weight_std = 0.07f;
  // Per expert, this many channels get their weights scaled by salient_gain.
  std::uint32_t salient_channels = 0;
  float salient_gain = 4.0f;
  // Router logit gap between consecutive experts of one token's top-K.
  double gate_gap = 0.4;
  // Norm (per dimension) of the embedding component orthogonal to the routers.
  float embedding_noise = 1.0f;

  // Throws ConfigError on a malformed spec.
  void validate() const;

  // [first, last) token ids of group g.
  std::pair<std::uint32_t, std::uint32_t> group_range(std::uint32_t g) const;
  std::uint32_t group_of(std::uint32_t token) const;
  // Experts (layer-0 ids) with affinity >= 0.5 for group g.
  std::vector<std::uint32_t> preferred_experts(std::uint32_t g) const;
};

// Affinity 1 for `preferred[g]`, 0 elsewhere.
std::vector<std::vector<double>> preferred_affinity(std::uint32_t experts,
                                                    const std::vector<std::vector<std::uint32_t>>& preferred);

// Mixes a base seed with a tag (splitmix64), for deriving independent streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

// perm[j] is the id in `layer` of the expert that layer 0 calls j.
std::vector<std::uint32_t> expert_permutation(const SyntheticSpec& spec, std::uint32_t layer);

// Per-group dispatch probabilities over layer-0 expert ids (sum to K).
std::vector<double> inclusion_probabilities(const SyntheticSpec& spec, std::uint32_t group);

// Deterministic in spec.seed. When N <= d the routers hold orthonormal rows and
// each token's embedding encodes its designed logits exactly, so the designed
// top-K holds in every layer. Otherwise routers and embeddings are Gaussian.
MoEModel generate_model(const SyntheticSpec& spec);

// Samples `length` tokens (spec.stream_length when 0): group from group_mix,
// then a uniform token of that group. Throws InputError when group_mix is not a
// probability vector over spec.groups.
TokenStream generate_stream(const SyntheticSpec& spec, std::span<const double> group_mix,
                            std::uint64_t seed, std::size_t length = 0, std::string name = "synthetic");

}  // namespace moeq
