#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moeq/matrix.hpp"

namespace moeq {

struct MoEConfig {
  std::uint32_t num_layers = 0;
  std::uint32_t experts_per_layer = 0;  // N
  std::uint32_t hidden_dim = 0;         // d
  std::uint32_t ffn_dim = 0;            // f, channels per expert
  std::uint32_t top_k = 0;              // K
  std::uint32_t vocab_size = 0;

  // Throws ConfigError on zero counts or top_k outside [1, N].
  void validate() const;
  // Additionally requires ffn_dim >= 100, which channel caching relies on.
  void validate_for_caching() const;

  bool operator==(const MoEConfig&) const = default;
};

// One expert FFN. Channel r is row r of w_in together with column r of w_out.
struct ExpertWeights {
  Matrix w_in;   // f x d
  Matrix w_out;  // d x f

  bool operator==(const ExpertWeights&) const = default;
};

struct MoELayer {
  Matrix router;  // N x d
  std::vector<ExpertWeights> experts;

  bool operator==(const MoELayer&) const = default;
};

struct MoEModel {
  MoEConfig config;
  Matrix embeddings;  // vocab_size x d
  std::vector<MoELayer> layers;

  // Allocates zero-filled weights with shapes implied by config.
  static MoEModel zeros(const MoEConfig& config);

  // Throws ConfigError on shape disagreement, InputError on non-finite weights.
  void validate() const;

  bool operator==(const MoEModel&) const = default;
};

struct TokenStream {
  std::string name;
  std::vector<std::uint32_t> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
  // Throws InputError on an empty stream or an out-of-range token id.
  void validate(const MoEConfig& config) const;
};

// Top-K dispatch of every (layer, position): expert ids in selection order and
// gate values renormalized over the selected experts.
class RoutingRecord {
 public:
  RoutingRecord() = default;
  RoutingRecord(std::uint32_t num_layers, std::size_t positions, std::uint32_t top_k);

  std::uint32_t num_layers() const noexcept { return num_layers_; }
  std::size_t positions() const noexcept { return positions_; }
  std::uint32_t top_k() const noexcept { return top_k_; }

  std::span<std::uint32_t> experts(std::uint32_t layer, std::size_t pos) noexcept {
    return {experts_.data() + offset(layer, pos), top_k_};
  }
  std::span<const std::uint32_t> experts(std::uint32_t layer, std::size_t pos) const noexcept {
    return {experts_.data() + offset(layer, pos), top_k_};
  }
  std::span<float> gates(std::uint32_t layer, std::size_t pos) noexcept {
    return {gates_.data() + offset(layer, pos), top_k_};
  }
  std::span<const float> gates(std::uint32_t layer, std::size_t pos) const noexcept {
    return {gates_.data() + offset(layer, pos), top_k_};
  }

  bool operator==(const RoutingRecord&) const = default;

 private:
  std::size_t offset(std::uint32_t layer, std::size_t pos) const noexcept {
    return (static_cast<std::size_t>(layer) * positions_ + pos) * top_k_;
  }

  std::uint32_t num_layers_ = 0;
  std::size_t positions_ = 0;
  std::uint32_t top_k_ = 0;
  std::vector<std::uint32_t> experts_;
  std::vector<float> gates_;
};

// What a channel observer sees for one (layer, position, routed expert, channel).
// magnitude = gate * relu(w_in[r] . h) * ||w_out[:, r]||_2, i.e. the gate-weighted
// L2 norm of the channel's contribution to the layer output.
struct ChannelEvent {
  std::uint32_t layer;
  std::uint32_t expert;
  std::uint32_t channel;
  std::size_t position;
  float gate;
  double magnitude;
};

// Positions are processed in blocks of kTokenBlock. Every event of one block is
// delivered from a single thread, in position order; different blocks may be
// delivered concurrently.
inline constexpr std::size_t kTokenBlock = 64;

using ChannelObserver = std::function<void(const ChannelEvent&)>;

enum class Execution { serial, parallel };

struct ForwardResult {
  Matrix hidden;  // T x d final hidden states
  RoutingRecord routing;
};

// Router logits are computed from the token embedding in every layer. Softmax
// runs over all N experts; the top-K (ties -> lower index) gates are renormalized.
RoutingRecord route(const MoEConfig& config, const Matrix& embeddings,
                    std::span<const Matrix> routers, const TokenStream& stream,
                    Execution exec = Execution::parallel);

ForwardResult forward(const MoEModel& model, const TokenStream& stream,
                      const ChannelObserver* observer = nullptr,
                      Execution exec = Execution::parallel);

// Forward pass over externally supplied (e.g. dequantized) expert weights.
// experts[layer][expert] must match config shapes.
Matrix forward_with_experts(const MoEConfig& config, const Matrix& embeddings,
                            const RoutingRecord& routing,
                            const std::vector<std::vector<ExpertWeights>>& experts,
                            const TokenStream& stream, const ChannelObserver* observer = nullptr,
                            Execution exec = Execution::parallel);

// Residual stream after every layer; entry l is T x d and the last entry equals
// the final hidden states.
std::vector<Matrix> layer_states(const MoEModel& model, const TokenStream& stream,
                                 Execution exec = Execution::parallel);
std::vector<Matrix> layer_states_with_experts(const MoEConfig& config, const Matrix& embeddings,
                                              const RoutingRecord& routing,
                                              const std::vector<std::vector<ExpertWeights>>& experts,
                                              const TokenStream& stream,
                                              Execution exec = Execution::parallel);

}  // namespace moeq
