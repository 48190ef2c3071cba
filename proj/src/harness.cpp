#include "moeq/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "moeq/error.hpp"

namespace moeq {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

TokenStream prefix(const TokenStream& stream, std::size_t n, const std::string& suffix) {
  TokenStream out;
  out.name = stream.name + suffix;
  out.tokens.assign(stream.tokens.begin(), stream.tokens.begin() + std::min(n, stream.size()));
  return out;
}

TokenStream concatenate(std::span<const TokenStream> streams, std::string name) {
  TokenStream out;
  out.name = std::move(name);
  for (const auto& s : streams) out.tokens.insert(out.tokens.end(), s.tokens.begin(), s.tokens.end());
  return out;
}

}  // namespace

void PhaseTimings::add(std::string stage, double seconds) {
  stages.push_back({std::move(stage), seconds, 0.0});
}

double PhaseTimings::total_seconds() const {
  double t = 0.0;
  for (const auto& s : stages) t += s.seconds;
  return t;
}

void PhaseTimings::finalize() {
  const double total = total_seconds();
  for (auto& s : stages)
    s.fraction = total > 0.0 ? s.seconds / total : 1.0 / static_cast<double>(stages.size());
}

double PhaseTimings::seconds_of(const std::string& stage) const {
  for (const auto& s : stages)
    if (s.stage == stage) return s.seconds;
  return 0.0;
}

double PhaseTimings::fraction_of(const std::string& stage) const {
  for (const auto& s : stages)
    if (s.stage == stage) return s.fraction;
  return 0.0;
}

double relative_l2(const Matrix& approx, const Matrix& reference) {
  if (approx.rows() != reference.rows() || approx.cols() != reference.cols())
    throw InputError("relative_l2: shape mismatch");
  double diff = 0.0;
  double norm = 0.0;
  const auto a = approx.values();
  const auto r = reference.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double delta = static_cast<double>(a[i]) - r[i];
    diff += delta * delta;
    norm += static_cast<double>(r[i]) * r[i];
  }
  if (norm == 0.0) return diff == 0.0 ? 0.0 : INFINITY;
  return std::sqrt(diff / norm);
}

void check_reference(const QuantizedModel& qmodel, const MoEModel& reference) {
  if (!(qmodel.config == reference.config))
    throw ConsistencyError("reference model config differs from the quantized model");
  if (!(qmodel.embeddings == reference.embeddings))
    throw ConsistencyError("reference model embeddings differ from the quantized model");
  for (std::size_t l = 0; l < reference.layers.size(); ++l)
    if (!(qmodel.routers[l] == reference.layers[l].router))
      throw ConsistencyError("reference model router " + std::to_string(l) + " differs from the quantized model");
}

FidelityReport measure_fidelity(const QuantizedModel& qmodel, const MoEModel& reference,
                                const TokenStream& stream, Execution exec) {
  check_reference(qmodel, reference);
  const auto ref_states = layer_states(reference, stream, exec);
  const auto routing = route_quantized(qmodel, stream, exec);
  const auto experts = dequantize_model(qmodel, exec);
  const auto q_states =
      layer_states_with_experts(qmodel.config, qmodel.embeddings, routing, experts, stream, exec);
  FidelityReport r;
  for (std::size_t l = 0; l < ref_states.size(); ++l) r.per_layer.push_back(relative_l2(q_states[l], ref_states[l]));
  r.relative_l2 = r.per_layer.empty() ? 0.0 : r.per_layer.back();
  r.average_bits = qmodel.average_bits();
  r.tokens = stream.size();
  return r;
}

OfflineResult run_offline(const MoEModel& model, std::span<const TokenStream> calibration,
                          const PipelineParams& params, Execution exec) {
  if (calibration.empty()) throw InputError("run_offline: at least one calibration stream is required");
  params.validate();
  model.validate();
  model.config.validate_for_caching();
  for (const auto& s : calibration) s.validate(model.config);

  // Warm-up pass, not timed: spins up the thread pool and touches the weights.
  analyze(model, prefix(calibration.front(), kTokenBlock, ""), exec);

  OfflineResult out;
  auto t = Clock::now();
  for (const auto& s : calibration) out.profiles.push_back(analyze(model, s, exec));
  out.joint = synthesize_joint(out.profiles);
  out.timings.add("analysis", seconds_since(t));

  t = Clock::now();
  out.clustering = cluster_layers(out.joint.synthesized, out.joint.token_share, params.fcm,
                                  params.boundary_delta, exec);
  out.timings.add("clustering", seconds_since(t));

  t = Clock::now();
  out.qmodel = quantize_model(model, width_table(out.clustering), exec);
  out.timings.add("quantization", seconds_since(t));

  t = Clock::now();
  out.qmodel.cache = build_cache(model, out.joint, params.cache_fraction);
  out.timings.add("cache_build", seconds_since(t));

  out.timings.finalize();
  return out;
}

OnlineResult run_online(const QuantizedModel& qmodel, const MoEModel* reference,
                        const TokenStream& stream, const PipelineParams& params, Execution exec) {
  params.validate();
  if (!qmodel.cache) throw ConfigError("run_online: the quantized model carries no channel cache");
  stream.validate(qmodel.config);
  if (reference != nullptr) check_reference(qmodel, *reference);

  OnlineResult out;
  const TokenStream probe = prefix(stream, params.probe_tokens, ":probe");
  out.probe_tokens = probe.size();
  out.significance_source = reference != nullptr ? "reference" : "dequantized";

  // Warm-up, not timed.
  forward_quantized(qmodel, probe, exec);

  auto t = Clock::now();
  if (reference != nullptr) {
    out.probe_profile = analyze(*reference, probe, exec);
  } else {
    out.probe_profile = analyze_with_experts(qmodel.config, qmodel.embeddings, qmodel.routers,
                                             dequantize_model(qmodel, exec), probe, exec);
  }
  out.plan = plan_switch(baseline_widths(qmodel), out.probe_profile, params.fcm, params.boundary_delta, exec);
  out.switched = apply_switch(qmodel, *qmodel.cache, out.plan, exec);
  out.timings.add("switch", seconds_since(t));

  t = Clock::now();
  out.hidden = forward_quantized(out.switched, stream, exec);
  out.timings.add("inference", seconds_since(t));
  out.timings.finalize();

  if (reference != nullptr) {
    out.before = measure_fidelity(qmodel, *reference, stream, exec);
    out.after = measure_fidelity(out.switched, *reference, stream, exec);
  }
  return out;
}

TrafficReport estimate_traffic(const QuantizedModel& qmodel, const TokenStream& stream, Execution exec) {
  qmodel.validate();
  stream.validate(qmodel.config);
  const auto& cfg = qmodel.config;
  std::vector<std::vector<std::uint64_t>> expert_bytes(cfg.num_layers);
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
    for (const auto& ex : qmodel.experts[l]) {
      std::uint64_t bytes = 0;
      for (std::uint32_t c = 0; c < cfg.ffn_dim; ++c) bytes += channel_bytes(ex.effective(c));
      expert_bytes[l].push_back(bytes);
    }
  }
  const std::uint64_t baseline_expert = 2ull * 2 * cfg.hidden_dim * cfg.ffn_dim;
  const auto routing = route_quantized(qmodel, stream, exec);

  TrafficReport r;
  r.tokens = stream.size();
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l)
    for (std::size_t p = 0; p < stream.size(); ++p)
      for (std::uint32_t e : routing.experts(l, p)) {
        r.quantized_bytes += expert_bytes[l][e];
        r.baseline_bytes += baseline_expert;
      }
  r.ratio = static_cast<double>(r.quantized_bytes) / static_cast<double>(r.baseline_bytes);
  return r;
}

const AblationRow& AblationTable::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw InputError("ablation table has no row '" + name + "'");
}

AblationTable eval_ablation(const MoEModel& model, std::span<const TokenStream> calibration,
                            const TokenStream& shifted, const PipelineParams& params, Execution exec) {
  const TokenStream mixture = concatenate(calibration, "calibration");
  const OfflineResult offline = run_offline(model, calibration, params, exec);
  const QuantizedModel uniform = quantize_uniform(model, BitWidth::int4(), exec);

  AblationTable table;
  AblationRow u{"uniform-int4", uniform.average_bits(), {}, {}, 0};
  u.error_calibration = measure_fidelity(uniform, model, mixture, exec).relative_l2;
  u.error_shift = measure_fidelity(uniform, model, shifted, exec).relative_l2;
  table.rows.push_back(u);

  AblationRow bq{"bq", offline.qmodel.average_bits(), {}, {}, 0};
  bq.error_calibration = measure_fidelity(offline.qmodel, model, mixture, exec).relative_l2;
  table.rows.push_back(bq);

  const OnlineResult online = run_online(offline.qmodel, &model, shifted, params, exec);
  table.rows.back().error_shift = online.before->relative_l2;
  AblationRow dqs{"bq+dqs", online.switched.average_bits(), {}, online.after->relative_l2,
                  online.plan.changed_count()};
  table.rows.push_back(dqs);
  return table;
}

SyntheticSpec desk_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.seed = seed;
  s.config = MoEConfig{4, 32, 64, 256, 2, 1024};
  s.groups = 2;
  s.concentration = 10.0;
  s.stream_length = 2048;
  // Layer-0 expert ids: expert g leads group g (affinity 1.0), experts 2-9
  // serve both groups as background (0.6), and experts 10-31 are almost never
  // routed to. A lead takes the first slot of nearly every token of its group,
  // so shifting the group mix moves significance between the two leads while
  // the background stays in use under either mix.
  s.affinity.assign(2, std::vector<double>(32, 0.0));
  for (std::uint32_t g = 0; g < 2; ++g) {
    for (std::uint32_t j = 0; j < 10; ++j) s.affinity[g][j] = 0.6;
    s.affinity[g][g] = 1.0;
  }
  s.weight_std = 0.07f;
  s.salient_channels = 3;
  s.salient_gain = 6.0f;
  return s;
}

DeskExperiment desk_experiment(std::uint64_t seed) {
  DeskExperiment x;
  x.seed = seed;
  x.spec = desk_spec(seed);
  x.calibration_mixes = {{0.9, 0.1}, {0.5, 0.5}};
  x.shift_mix = {0.1, 0.9};
  return x;
}

MoEModel DeskExperiment::model() const { return generate_model(spec); }

TokenStream DeskExperiment::stream(std::span<const double> mix, std::size_t length, std::uint64_t tag,
                                   std::string name) const {
  return generate_stream(spec, mix, derive_seed(seed, tag), length, std::move(name));
}

std::vector<TokenStream> DeskExperiment::calibration() const {
  std::vector<TokenStream> out;
  for (std::size_t i = 0; i < calibration_mixes.size(); ++i)
    out.push_back(stream(calibration_mixes[i], calibration_tokens, 100 + i, "calibration-" + std::to_string(i)));
  return out;
}

TokenStream DeskExperiment::shift() const { return stream(shift_mix, shift_tokens, 200, "shift"); }

}  // namespace moeq
