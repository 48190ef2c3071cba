#include "moeq/moe.hpp"

#include <cmath>
#include <string>

#include "moeq/error.hpp"
#include "moeq/kernels.hpp"

namespace moeq {

void MoEConfig::validate() const {
  if (num_layers == 0 || experts_per_layer == 0 || hidden_dim == 0 || ffn_dim == 0 ||
      top_k == 0 || vocab_size == 0)
    throw ConfigError("MoEConfig: all counts must be >= 1");
  if (top_k > experts_per_layer)
    throw ConfigError("MoEConfig: top_k " + std::to_string(top_k) + " exceeds experts_per_layer " +
                      std::to_string(experts_per_layer));
}

void MoEConfig::validate_for_caching() const {
  validate();
  if (ffn_dim < 100)
    throw ConfigError("MoEConfig: channel caching needs ffn_dim >= 100, got " +
                      std::to_string(ffn_dim));
}

MoEModel MoEModel::zeros(const MoEConfig& config) {
  config.validate();
  MoEModel model;
  model.config = config;
  model.embeddings = Matrix(config.vocab_size, config.hidden_dim);
  model.layers.resize(config.num_layers);
  for (auto& layer : model.layers) {
    layer.router = Matrix(config.experts_per_layer, config.hidden_dim);
    layer.experts.assign(config.experts_per_layer,
                         ExpertWeights{Matrix(config.ffn_dim, config.hidden_dim),
                                       Matrix(config.hidden_dim, config.ffn_dim)});
  }
  return model;
}

namespace {

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols)
    throw ConfigError(std::string("MoEModel: ") + what + " has shape " + std::to_string(m.rows()) +
                      "x" + std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                      std::to_string(cols));
}

void check_finite(const Matrix& m, const char* what) {
  for (float v : m.values())
    if (!std::isfinite(v)) throw InputError(std::string("MoEModel: non-finite value in ") + what);
}

}  // namespace

void MoEModel::validate() const {
  config.validate();
  const std::size_t d = config.hidden_dim;
  check_shape(embeddings, config.vocab_size, d, "embeddings");
  check_finite(embeddings, "embeddings");
  if (layers.size() != config.num_layers) throw ConfigError("MoEModel: layer count mismatch");
  for (const auto& layer : layers) {
    check_shape(layer.router, config.experts_per_layer, d, "router");
    check_finite(layer.router, "router");
    if (layer.experts.size() != config.experts_per_layer)
      throw ConfigError("MoEModel: expert count mismatch");
    for (const auto& e : layer.experts) {
      check_shape(e.w_in, config.ffn_dim, d, "w_in");
      check_shape(e.w_out, d, config.ffn_dim, "w_out");
      check_finite(e.w_in, "w_in");
      check_finite(e.w_out, "w_out");
    }
  }
}

void TokenStream::validate(const MoEConfig& config) const {
  if (tokens.empty()) throw InputError("token stream '" + name + "' is empty");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= config.vocab_size)
      throw InputError("token stream '" + name + "': token id " + std::to_string(tokens[i]) +
                       " at position " + std::to_string(i) + " >= vocab_size " +
                       std::to_string(config.vocab_size));
  }
}

RoutingRecord::RoutingRecord(std::uint32_t num_layers, std::size_t positions, std::uint32_t top_k)
    : num_layers_(num_layers),
      positions_(positions),
      top_k_(top_k),
      experts_(static_cast<std::size_t>(num_layers) * positions * top_k),
      gates_(static_cast<std::size_t>(num_layers) * positions * top_k) {}

RoutingRecord route(const MoEConfig& config, const Matrix& embeddings,
                    std::span<const Matrix> routers, const TokenStream& stream, Execution exec) {
  stream.validate(config);
  RoutingRecord routing(config.num_layers, stream.size(), config.top_k);
  if (exec == Execution::serial)
    kernels::route_serial(config, embeddings, routers, stream.tokens, routing);
  else
    kernels::route_parallel(config, embeddings, routers, stream.tokens, routing);
  return routing;
}

namespace {

std::vector<Matrix> routers_of(const MoEModel& model) {
  std::vector<Matrix> routers;
  routers.reserve(model.layers.size());
  for (const auto& layer : model.layers) routers.push_back(layer.router);
  return routers;
}

Matrix run_experts(const MoEConfig& config, const Matrix& embeddings, const RoutingRecord& routing,
                   const kernels::ExpertTable& experts, const TokenStream& stream,
                   const ChannelObserver* observer, Execution exec,
                   std::vector<Matrix>* states = nullptr) {
  stream.validate(config);
  if (routing.positions() != stream.size() || routing.num_layers() != config.num_layers)
    throw InputError("forward: routing record does not match the stream");
  if (experts.size() != config.num_layers) throw ConfigError("forward: expert table layer count");
  for (const auto& layer : experts)
    if (layer.size() != config.experts_per_layer)
      throw ConfigError("forward: expert table expert count");
  Matrix hidden(stream.size(), config.hidden_dim);
  std::vector<std::vector<std::vector<double>>> norms;
  if (observer != nullptr) norms = kernels::output_column_norms(experts);
  if (states != nullptr) states->assign(config.num_layers, Matrix(stream.size(), config.hidden_dim));
  const kernels::MoEInputs in{config, embeddings, routing, experts, stream.tokens, observer,
                              observer != nullptr ? &norms : nullptr, states};
  if (exec == Execution::serial)
    kernels::moe_forward_serial(in, hidden);
  else
    kernels::moe_forward_parallel(in, hidden);
  return hidden;
}

}  // namespace

Matrix forward_with_experts(const MoEConfig& config, const Matrix& embeddings,
                            const RoutingRecord& routing,
                            const std::vector<std::vector<ExpertWeights>>& experts,
                            const TokenStream& stream, const ChannelObserver* observer,
                            Execution exec) {
  kernels::ExpertTable table(experts.begin(), experts.end());
  return run_experts(config, embeddings, routing, table, stream, observer, exec);
}

ForwardResult forward(const MoEModel& model, const TokenStream& stream,
                      const ChannelObserver* observer, Execution exec) {
  const auto routers = routers_of(model);
  ForwardResult result;
  result.routing = route(model.config, model.embeddings, routers, stream, exec);
  kernels::ExpertTable table;
  table.reserve(model.layers.size());
  for (const auto& layer : model.layers) table.emplace_back(layer.experts);
  result.hidden =
      run_experts(model.config, model.embeddings, result.routing, table, stream, observer, exec);
  return result;
}

std::vector<Matrix> layer_states(const MoEModel& model, const TokenStream& stream, Execution exec) {
  const auto routers = routers_of(model);
  const auto routing = route(model.config, model.embeddings, routers, stream, exec);
  kernels::ExpertTable table;
  table.reserve(model.layers.size());
  for (const auto& layer : model.layers) table.emplace_back(layer.experts);
  std::vector<Matrix> states;
  run_experts(model.config, model.embeddings, routing, table, stream, nullptr, exec, &states);
  return states;
}

std::vector<Matrix> layer_states_with_experts(const MoEConfig& config, const Matrix& embeddings,
                                              const RoutingRecord& routing,
                                              const std::vector<std::vector<ExpertWeights>>& experts,
                                              const TokenStream& stream, Execution exec) {
  kernels::ExpertTable table(experts.begin(), experts.end());
  std::vector<Matrix> states;
  run_experts(config, embeddings, routing, table, stream, nullptr, exec, &states);
  return states;
}

}  // namespace moeq
