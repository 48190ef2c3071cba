#include "moeq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <string>

#include "moeq/error.hpp"
#include "moeq/kernels.hpp"

namespace moeq {

BitWidth BitWidth::from_bits(int bits) {
  if (bits != 2 && bits != 4 && bits != 6 && bits != 8)
    throw InputError("unsupported bit width " + std::to_string(bits) + " (expected 2, 4, 6 or 8)");
  return BitWidth(bits);
}

ChannelCodec fit_codec(std::span<const float> values, BitWidth width) {
  if (values.empty()) throw InputError("fit_codec: empty channel");
  float max_abs = 0.0f;
  for (float v : values) {
    if (!std::isfinite(v)) throw InputError("fit_codec: non-finite value");
    max_abs = std::max(max_abs, std::fabs(v));
  }
  if (max_abs == 0.0f) return {width, 1.0f};
  const float scale = max_abs / static_cast<float>(width.max_code());
  // A denormal max_abs can underflow the division; fall back to the smallest normal.
  return {width, scale > 0.0f ? scale : std::numeric_limits<float>::min()};
}

std::vector<std::int32_t> quantize_channel(std::span<const float> values, const ChannelCodec& codec) {
  if (!(codec.scale > 0.0f) || !std::isfinite(codec.scale))
    throw InputError("quantize_channel: scale must be positive and finite");
  const float inv = 1.0f / codec.scale;
  const auto limit = static_cast<float>(codec.width.max_code());
  std::vector<std::int32_t> codes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw InputError("quantize_channel: non-finite value");
    // nearbyint honors the default round-to-nearest-even mode.
    const float q = std::nearbyint(values[i] * inv);
    codes[i] = static_cast<std::int32_t>(std::clamp(q, -limit, limit));
  }
  return codes;
}

std::vector<float> dequantize_channel(std::span<const std::int32_t> codes, const ChannelCodec& codec) {
  const std::int32_t limit = codec.width.max_code();
  std::vector<float> values(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] < -limit || codes[i] > limit)
      throw FormatError("dequantize_channel: code " + std::to_string(codes[i]) + " outside +-" +
                        std::to_string(limit));
    values[i] = static_cast<float>(codes[i]) * codec.scale;
  }
  return values;
}

PackedRow pack_row(std::span<const std::int32_t> codes, BitWidth width) {
  const std::int32_t limit = width.max_code();
  const std::uint32_t lanes = width.lanes_per_word();
  const auto b = static_cast<std::uint32_t>(width.bits());
  PackedRow row{width, static_cast<std::uint32_t>(codes.size()),
                std::vector<std::uint32_t>(width.words_for(codes.size()), 0u)};
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] < -limit || codes[i] > limit)
      throw InputError("pack_row: code " + std::to_string(codes[i]) + " outside +-" +
                       std::to_string(limit));
    const auto lane = static_cast<std::uint32_t>(i % lanes);
    const auto biased = static_cast<std::uint32_t>(codes[i] + static_cast<std::int32_t>(width.offset()));
    row.words[i / lanes] |= biased << (lane * b);
  }
  return row;
}

std::vector<std::int32_t> unpack_row(const PackedRow& row) {
  const BitWidth width = row.width;
  const std::uint32_t lanes = width.lanes_per_word();
  const auto b = static_cast<std::uint32_t>(width.bits());
  if (row.words.size() != width.words_for(row.lane_count))
    throw FormatError("unpack_row: " + std::to_string(row.words.size()) + " words for " +
                      std::to_string(row.lane_count) + " lanes at " + std::to_string(b) + " bits");
  const std::uint32_t lane_mask = (1u << b) - 1u;
  std::vector<std::int32_t> codes(row.lane_count);
  for (std::size_t w = 0; w < row.words.size(); ++w) {
    const std::uint32_t word = row.words[w];
    const std::size_t first = w * lanes;
    const auto used = static_cast<std::uint32_t>(std::min<std::size_t>(lanes, row.lane_count - first));
    const std::uint32_t used_bits = used * b;
    if (used_bits < 32 && (word >> used_bits) != 0u)
      throw FormatError("unpack_row: nonzero pad bits in word " + std::to_string(w));
    for (std::uint32_t j = 0; j < used; ++j) {
      const std::uint32_t biased = (word >> (j * b)) & lane_mask;
      const std::int32_t code = static_cast<std::int32_t>(biased) - static_cast<std::int32_t>(width.offset());
      if (code < -width.max_code())
        throw FormatError("unpack_row: reserved code -2^(b-1) in word " + std::to_string(w));
      codes[first + j] = code;
    }
  }
  return codes;
}

std::vector<float> channel_values(const ExpertWeights& expert, std::size_t channel) {
  const std::size_t d = expert.w_in.cols();
  std::vector<float> values(2 * d);
  const auto in_row = expert.w_in.row(channel);
  std::copy(in_row.begin(), in_row.end(), values.begin());
  for (std::size_t i = 0; i < d; ++i) values[d + i] = expert.w_out(i, channel);
  return values;
}

QuantizedChannel quantize_values(std::span<const float> values, BitWidth width) {
  const ChannelCodec codec = fit_codec(values, width);
  const auto codes = quantize_channel(values, codec);
  return {codec, pack_row(codes, width)};
}

std::vector<float> dequantize(const QuantizedChannel& channel) {
  if (channel.row.width != channel.codec.width)
    throw FormatError("quantized channel: codec and packed row widths differ");
  if (!(channel.codec.scale > 0.0f) || !std::isfinite(channel.codec.scale))
    throw FormatError("quantized channel: invalid scale");
  return dequantize_channel(unpack_row(channel.row), channel.codec);
}

const QuantizedChannel& QuantizedExpert::effective(std::uint32_t channel) const {
  const auto it = overrides.find(channel);
  return it != overrides.end() ? it->second : channels.at(channel);
}

QuantizedExpert quantize_expert(const ExpertWeights& expert, BitWidth width) {
  QuantizedExpert q;
  q.baseline = width;
  q.channels.reserve(expert.w_in.rows());
  for (std::size_t r = 0; r < expert.w_in.rows(); ++r)
    q.channels.push_back(quantize_values(channel_values(expert, r), width));
  return q;
}

ExpertWeights dequantize_expert(const QuantizedExpert& expert, std::size_t hidden_dim) {
  const std::size_t f = expert.channels.size();
  ExpertWeights w{Matrix(f, hidden_dim), Matrix(hidden_dim, f)};
  for (std::size_t r = 0; r < f; ++r) {
    const QuantizedChannel& ch = expert.effective(static_cast<std::uint32_t>(r));
    if (ch.row.lane_count != 2 * hidden_dim)
      throw FormatError("dequantize_expert: channel " + std::to_string(r) + " has " +
                        std::to_string(ch.row.lane_count) + " lanes, expected " +
                        std::to_string(2 * hidden_dim));
    const auto values = dequantize(ch);
    std::copy(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(hidden_dim),
              w.w_in.row(r).begin());
    for (std::size_t i = 0; i < hidden_dim; ++i) w.w_out(i, r) = values[hidden_dim + i];
  }
  return w;
}

void QuantizedModel::validate() const {
  config.validate();
  const std::size_t d = config.hidden_dim;
  if (embeddings.rows() != config.vocab_size || embeddings.cols() != d)
    throw ConfigError("QuantizedModel: embeddings shape mismatch");
  if (routers.size() != config.num_layers || experts.size() != config.num_layers)
    throw ConfigError("QuantizedModel: layer count mismatch");
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    if (routers[l].rows() != config.experts_per_layer || routers[l].cols() != d)
      throw ConfigError("QuantizedModel: router shape mismatch");
    if (experts[l].size() != config.experts_per_layer)
      throw ConfigError("QuantizedModel: expert count mismatch");
    for (const auto& e : experts[l]) {
      if (e.channels.size() != config.ffn_dim)
        throw ConfigError("QuantizedModel: channel count mismatch");
      for (const auto& ch : e.channels) {
        if (ch.width() != e.baseline)
          throw FormatError("QuantizedModel: baseline channel width differs from expert baseline");
        if (ch.row.lane_count != 2 * d || ch.row.words.size() != ch.row.width.words_for(2 * d))
          throw FormatError("QuantizedModel: packed row lane count mismatch");
      }
      for (const auto& [idx, ch] : e.overrides) {
        if (idx >= config.ffn_dim) throw FormatError("QuantizedModel: override channel out of range");
        if (ch.row.lane_count != 2 * d || ch.row.words.size() != ch.row.width.words_for(2 * d))
          throw FormatError("QuantizedModel: override lane count mismatch");
      }
    }
  }
}

std::uint64_t channel_bytes(const QuantizedChannel& channel) {
  return 4ull * channel.row.words.size() + 4ull;
}

std::uint64_t QuantizedModel::payload_bytes() const {
  std::uint64_t bytes = 0;
  for (const auto& layer : experts)
    for (const auto& e : layer)
      for (std::size_t r = 0; r < e.channels.size(); ++r)
        bytes += channel_bytes(e.effective(static_cast<std::uint32_t>(r)));
  return bytes;
}

double QuantizedModel::average_bits() const {
  const double weights = 2.0 * config.hidden_dim * config.ffn_dim * config.experts_per_layer *
                         config.num_layers;
  return weights > 0.0 ? 8.0 * static_cast<double>(payload_bytes()) / weights : 0.0;
}

QuantizedModel quantize_model(const MoEModel& model, const WidthTable& widths, Execution exec) {
  model.validate();
  const auto& cfg = model.config;
  if (widths.size() != cfg.num_layers) throw ConfigError("quantize_model: width table layer count");
  for (const auto& w : widths)
    if (w.size() != cfg.experts_per_layer) throw ConfigError("quantize_model: width table expert count");

  QuantizedModel q;
  q.config = cfg;
  q.embeddings = model.embeddings;
  q.experts.assign(cfg.num_layers, std::vector<QuantizedExpert>(cfg.experts_per_layer));
  for (const auto& layer : model.layers) q.routers.push_back(layer.router);

  const auto jobs = static_cast<std::int64_t>(cfg.num_layers) * cfg.experts_per_layer;
  const auto run = [&](std::int64_t job) {
    const auto l = static_cast<std::size_t>(job / cfg.experts_per_layer);
    const auto e = static_cast<std::size_t>(job % cfg.experts_per_layer);
    q.experts[l][e] = quantize_expert(model.layers[l].experts[e], widths[l][e]);
  };
  if (exec == Execution::serial) {
    for (std::int64_t j = 0; j < jobs; ++j) run(j);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t j = 0; j < jobs; ++j) run(j);
  }
  return q;
}

QuantizedModel quantize_uniform(const MoEModel& model, BitWidth width, Execution exec) {
  const WidthTable widths(model.config.num_layers,
                          std::vector<BitWidth>(model.config.experts_per_layer, width));
  return quantize_model(model, widths, exec);
}

std::vector<std::vector<ExpertWeights>> dequantize_model(const QuantizedModel& qmodel, Execution exec) {
  qmodel.validate();
  const auto& cfg = qmodel.config;
  std::vector<std::vector<ExpertWeights>> out(cfg.num_layers,
                                              std::vector<ExpertWeights>(cfg.experts_per_layer));
  const auto jobs = static_cast<std::int64_t>(cfg.num_layers) * cfg.experts_per_layer;
  // Exceptions must not escape an OpenMP region; collect the first one.
  std::exception_ptr failure;
  const auto run = [&](std::int64_t job) {
    const auto l = static_cast<std::size_t>(job / cfg.experts_per_layer);
    const auto e = static_cast<std::size_t>(job % cfg.experts_per_layer);
    try {
      out[l][e] = dequantize_expert(qmodel.experts[l][e], cfg.hidden_dim);
    } catch (...) {
#pragma omp critical(moeq_dequant_failure)
      if (!failure) failure = std::current_exception();
    }
  };
  if (exec == Execution::serial) {
    for (std::int64_t j = 0; j < jobs; ++j) run(j);
  } else {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t j = 0; j < jobs; ++j) run(j);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

RoutingRecord route_quantized(const QuantizedModel& qmodel, const TokenStream& stream, Execution exec) {
  return route(qmodel.config, qmodel.embeddings, qmodel.routers, stream, exec);
}

Matrix forward_quantized(const QuantizedModel& qmodel, const TokenStream& stream, Execution exec) {
  const auto experts = dequantize_model(qmodel, exec);
  const auto routing = route_quantized(qmodel, stream, exec);
  return forward_with_experts(qmodel.config, qmodel.embeddings, routing, experts, stream, nullptr,
                              exec);
}

}  // namespace moeq
