#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeq/clustering.hpp"
#include "moeq/moe.hpp"
#include "moeq/params.hpp"
#include "moeq/quant.hpp"
#include "moeq/significance.hpp"
#include "moeq/switching.hpp"
#include "moeq/synthetic.hpp"

namespace moeq {

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
  double fraction = 0.0;
};

// Wall time per stage of one phase, measured with a monotonic clock.
struct PhaseTimings {
  std::vector<StageTiming> stages;

  void add(std::string stage, double seconds);
  double total_seconds() const;
  // Sets fraction = seconds / total; an all-zero phase splits evenly.
  void finalize();
  double seconds_of(const std::string& stage) const;
  double fraction_of(const std::string& stage) const;
};

struct OverheadReport {
  PhaseTimings offline;  // analysis, clustering, quantization, cache_build
  PhaseTimings online;   // switch, inference
};

struct FidelityReport {
  double relative_l2 = 0.0;        // final hidden states
  std::vector<double> per_layer;   // residual stream after each layer
  double average_bits = 0.0;
  std::uint64_t tokens = 0;
};

// ||approx - ref||_F / ||ref||_F; 0 when both are zero.
double relative_l2(const Matrix& approx, const Matrix& reference);

FidelityReport measure_fidelity(const QuantizedModel& qmodel, const MoEModel& reference,
                                const TokenStream& stream, Execution exec = Execution::parallel);

// Throws ConsistencyError unless the reference shares config, embeddings and
// routers with the quantized model.
void check_reference(const QuantizedModel& qmodel, const MoEModel& reference);

struct OfflineResult {
  QuantizedModel qmodel;  // carries the channel cache
  std::vector<SignificanceProfile> profiles;
  JointProfile joint;
  std::vector<LayerClustering> clustering;
  PhaseTimings timings;
};

// significance -> joint profile -> per-layer clustering -> baseline quantization
// -> channel cache. Throws InputError without calibration streams.
OfflineResult run_offline(const MoEModel& model, std::span<const TokenStream> calibration,
                          const PipelineParams& params, Execution exec = Execution::parallel);

struct OnlineResult {
  QuantizedModel switched;
  SwitchPlan plan;
  SignificanceProfile probe_profile;
  std::string significance_source;  // "reference" or "dequantized"
  std::size_t probe_tokens = 0;
  Matrix hidden;                    // final hidden states of the switched model
  PhaseTimings timings;
  std::optional<FidelityReport> before;  // only with a reference model
  std::optional<FidelityReport> after;
};

// Profiles the first params.probe_tokens tokens of the stream (on the reference
// model when given, otherwise on dequantized weights), plans and applies the
// switch, then runs inference over the whole stream. Throws ConfigError when
// the model has no cache.
OnlineResult run_online(const QuantizedModel& qmodel, const MoEModel* reference,
                        const TokenStream& stream, const PipelineParams& params,
                        Execution exec = Execution::parallel);

struct TrafficReport {
  std::uint64_t tokens = 0;
  std::uint64_t quantized_bytes = 0;  // packed words and scales of every routed expert
  std::uint64_t baseline_bytes = 0;   // same traversal at 2 bytes per weight
  double ratio = 0.0;
};

TrafficReport estimate_traffic(const QuantizedModel& qmodel, const TokenStream& stream,
                               Execution exec = Execution::parallel);

struct AblationRow {
  std::string name;
  double average_bits = 0.0;
  std::optional<double> error_calibration;  // on the concatenated calibration streams
  std::optional<double> error_shift;        // on the new stream
  std::size_t changed_experts = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // uniform-int4, bq, bq+dqs

  const AblationRow& row(const std::string& name) const;
};

AblationTable eval_ablation(const MoEModel& model, std::span<const TokenStream> calibration,
                            const TokenStream& shifted, const PipelineParams& params,
                            Execution exec = Execution::parallel);

// The pinned experiment: 4 layers, N=32, d=64, f=256, K=2, vocab 1024, two
// token groups, calibration mixes (0.9, 0.1) and (0.5, 0.5), shift (0.1, 0.9).
struct DeskExperiment {
  std::uint64_t seed = 42;
  SyntheticSpec spec;
  std::vector<std::vector<double>> calibration_mixes;
  std::vector<double> shift_mix;
  std::size_t calibration_tokens = 2048;
  std::size_t shift_tokens = 4096;

  MoEModel model() const;
  std::vector<TokenStream> calibration() const;
  TokenStream shift() const;
  // Any mix over the generator's groups, with a seed derived from `tag`.
  TokenStream stream(std::span<const double> mix, std::size_t length, std::uint64_t tag,
                     std::string name) const;
};

inline constexpr std::uint64_t kDeskSeeds[] = {42, 43, 44};

SyntheticSpec desk_spec(std::uint64_t seed);
DeskExperiment desk_experiment(std::uint64_t seed);

}  // namespace moeq
