#pragma once

// Token-level compute kernels. Each kernel has a serial reference and an OpenMP
// variant that parallelizes over blocks of kTokenBlock positions. Per-position
// arithmetic is identical in both, so results are bit-identical.

#include <cstdint>
#include <span>
#include <vector>

#include "moeq/moe.hpp"

namespace moeq::kernels {

using ExpertTable = std::vector<std::span<const ExpertWeights>>;  // [layer][expert]

// Per-(layer, expert) column norms ||w_out[:, r]||_2, needed by observers.
std::vector<std::vector<std::vector<double>>> output_column_norms(const ExpertTable& experts);

void route_serial(const MoEConfig& config, const Matrix& embeddings,
                  std::span<const Matrix> routers, std::span<const std::uint32_t> tokens,
                  RoutingRecord& out);
void route_parallel(const MoEConfig& config, const Matrix& embeddings,
                    std::span<const Matrix> routers, std::span<const std::uint32_t> tokens,
                    RoutingRecord& out);

struct MoEInputs {
  const MoEConfig& config;
  const Matrix& embeddings;
  const RoutingRecord& routing;
  const ExpertTable& experts;
  std::span<const std::uint32_t> tokens;
  const ChannelObserver* observer = nullptr;
  // Required when observer is set; see output_column_norms.
  const std::vector<std::vector<std::vector<double>>>* column_norms = nullptr;
  // When set, holds num_layers matrices of T x d receiving the residual stream
  // after each layer.
  std::vector<Matrix>* layer_states = nullptr;
};

// Fills hidden (T x d) with the final residual stream.
void moe_forward_serial(const MoEInputs& in, Matrix& hidden);
void moe_forward_parallel(const MoEInputs& in, Matrix& hidden);

// Number of worker threads the parallel kernels will use.
int max_threads() noexcept;

}  // namespace moeq::kernels
