#pragma once

// JSON renderings of pipeline results. Keys keep insertion order so output is
// byte-stable for fixed inputs (timing sections excepted).

#include <json.hpp>

#include "moeq/formats.hpp"
#include "moeq/harness.hpp"

namespace moeq {

using Json = nlohmann::ordered_json;

// Per-layer S_exp and token shares, plus the `top_channels` most significant
// channels of every layer.
Json significance_json(const SignificanceProfile& profile, std::size_t top_channels = 8);
Json joint_json(const JointProfile& joint);
Json assignment_json(const std::vector<LayerClustering>& layers, const QuantizedModel& qmodel);
Json timings_json(const PhaseTimings& timings);
Json fidelity_json(const FidelityReport& report);
Json traffic_json(const TrafficReport& report);
Json plan_json(const SwitchPlan& plan);
Json ablation_json(const AblationTable& table);
// Layout and storage summary of a quantized model.
Json qmodel_json(const QuantizedModel& qmodel);

}  // namespace moeq
