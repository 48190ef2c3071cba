#include "moeq/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moeq::kernels {
namespace {

std::size_t block_count(std::size_t positions) {
  return (positions + kTokenBlock - 1) / kTokenBlock;
}

void route_position(const MoEConfig& config, const Matrix& embeddings,
                    std::span<const Matrix> routers, std::uint32_t token, std::size_t pos,
                    std::vector<double>& logits, std::vector<std::uint32_t>& order,
                    RoutingRecord& out) {
  const std::uint32_t n = config.experts_per_layer;
  const std::uint32_t k = config.top_k;
  const auto emb = embeddings.row(token);
  for (std::uint32_t layer = 0; layer < config.num_layers; ++layer) {
    const Matrix& router = routers[layer];
    double max_logit = -INFINITY;
    for (std::uint32_t j = 0; j < n; ++j) {
      const auto w = router.row(j);
      double acc = 0.0;
      for (std::size_t c = 0; c < emb.size(); ++c) acc += static_cast<double>(w[c]) * emb[c];
      logits[j] = acc;
      max_logit = std::max(max_logit, acc);
    }
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                      });
    // Softmax over all experts, then renormalize over the selected ones. The
    // full-softmax denominator cancels, so only the selected exponentials matter.
    double selected = 0.0;
    auto experts = out.experts(layer, pos);
    auto gates = out.gates(layer, pos);
    for (std::uint32_t i = 0; i < k; ++i) selected += std::exp(logits[order[i]] - max_logit);
    for (std::uint32_t i = 0; i < k; ++i) {
      experts[i] = order[i];
      gates[i] = static_cast<float>(std::exp(logits[order[i]] - max_logit) / selected);
    }
  }
}

void route_range(const MoEConfig& config, const Matrix& embeddings,
                 std::span<const Matrix> routers, std::span<const std::uint32_t> tokens,
                 std::size_t begin, std::size_t end, RoutingRecord& out) {
  std::vector<double> logits(config.experts_per_layer);
  std::vector<std::uint32_t> order(config.experts_per_layer);
  for (std::size_t pos = begin; pos < end; ++pos)
    route_position(config, embeddings, routers, tokens[pos], pos, logits, order, out);
}

struct Scratch {
  std::vector<double> hidden;
  std::vector<double> next;
  std::vector<double> act;
  std::vector<float> input;
};

void forward_position(const MoEInputs& in, std::size_t pos, Scratch& s, std::span<float> result) {
  const std::size_t d = in.config.hidden_dim;
  const std::size_t f = in.config.ffn_dim;
  const auto emb = in.embeddings.row(in.tokens[pos]);
  std::copy(emb.begin(), emb.end(), s.input.begin());
  for (std::uint32_t layer = 0; layer < in.config.num_layers; ++layer) {
    for (std::size_t c = 0; c < d; ++c) s.next[c] = s.input[c];
    const auto experts = in.routing.experts(layer, pos);
    const auto gates = in.routing.gates(layer, pos);
    for (std::size_t k = 0; k < experts.size(); ++k) {
      const ExpertWeights& ew = in.experts[layer][experts[k]];
      const double gate = gates[k];
      for (std::size_t r = 0; r < f; ++r) {
        const auto w = ew.w_in.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(w[c]) * s.input[c];
        s.act[r] = acc > 0.0 ? acc : 0.0;
      }
      if (in.observer != nullptr) {
        const auto& norms = (*in.column_norms)[layer][experts[k]];
        for (std::size_t r = 0; r < f; ++r) {
          (*in.observer)(ChannelEvent{layer, experts[k], static_cast<std::uint32_t>(r), pos,
                                      gates[k], gate * s.act[r] * norms[r]});
        }
      }
      for (std::size_t i = 0; i < d; ++i) {
        const auto w = ew.w_out.row(i);
        double acc = 0.0;
        for (std::size_t r = 0; r < f; ++r) acc += static_cast<double>(w[r]) * s.act[r];
        s.next[i] += gate * acc;
      }
    }
    for (std::size_t c = 0; c < d; ++c) s.input[c] = static_cast<float>(s.next[c]);
    if (in.layer_states != nullptr)
      std::copy(s.input.begin(), s.input.end(), (*in.layer_states)[layer].row(pos).begin());
  }
  std::copy(s.input.begin(), s.input.end(), result.begin());
}

Scratch make_scratch(const MoEConfig& config) {
  return Scratch{std::vector<double>(config.hidden_dim), std::vector<double>(config.hidden_dim),
                 std::vector<double>(config.ffn_dim), std::vector<float>(config.hidden_dim)};
}

}  // namespace

std::vector<std::vector<std::vector<double>>> output_column_norms(const ExpertTable& experts) {
  std::vector<std::vector<std::vector<double>>> norms(experts.size());
  for (std::size_t l = 0; l < experts.size(); ++l) {
    norms[l].resize(experts[l].size());
    for (std::size_t e = 0; e < experts[l].size(); ++e) {
      const Matrix& w_out = experts[l][e].w_out;
      std::vector<double> sq(w_out.cols(), 0.0);
      for (std::size_t i = 0; i < w_out.rows(); ++i) {
        const auto row = w_out.row(i);
        for (std::size_t r = 0; r < row.size(); ++r) sq[r] += static_cast<double>(row[r]) * row[r];
      }
      for (double& v : sq) v = std::sqrt(v);
      norms[l][e] = std::move(sq);
    }
  }
  return norms;
}

void route_serial(const MoEConfig& config, const Matrix& embeddings,
                  std::span<const Matrix> routers, std::span<const std::uint32_t> tokens,
                  RoutingRecord& out) {
  route_range(config, embeddings, routers, tokens, 0, tokens.size(), out);
}

void route_parallel(const MoEConfig& config, const Matrix& embeddings,
                    std::span<const Matrix> routers, std::span<const std::uint32_t> tokens,
                    RoutingRecord& out) {
  const auto blocks = static_cast<std::int64_t>(block_count(tokens.size()));
#pragma omp parallel for schedule(static)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * kTokenBlock;
    const std::size_t end = std::min(tokens.size(), begin + kTokenBlock);
    route_range(config, embeddings, routers, tokens, begin, end, out);
  }
}

void moe_forward_serial(const MoEInputs& in, Matrix& hidden) {
  Scratch s = make_scratch(in.config);
  for (std::size_t pos = 0; pos < in.tokens.size(); ++pos) forward_position(in, pos, s, hidden.row(pos));
}

void moe_forward_parallel(const MoEInputs& in, Matrix& hidden) {
  const auto blocks = static_cast<std::int64_t>(block_count(in.tokens.size()));
#pragma omp parallel
  {
    Scratch s = make_scratch(in.config);
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < blocks; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * kTokenBlock;
      const std::size_t end = std::min(in.tokens.size(), begin + kTokenBlock);
      for (std::size_t pos = begin; pos < end; ++pos) forward_position(in, pos, s, hidden.row(pos));
    }
  }
}

int max_threads() noexcept {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace moeq::kernels
