#include "moeq/reports.hpp"

#include <algorithm>

namespace moeq {
namespace {

Json widths_json(const std::vector<BitWidth>& widths) {
  Json out = Json::array();
  for (BitWidth w : widths) out.push_back(w.bits());
  return out;
}

Json width_histogram(const QuantizedModel& q) {
  Json out = Json::object();
  for (BitWidth w : kAllWidths) {
    std::size_t n = 0;
    for (const auto& layer : q.experts)
      for (const auto& e : layer) n += e.baseline == w ? 1 : 0;
    out["int" + std::to_string(w.bits())] = n;
  }
  return out;
}

}  // namespace

Json significance_json(const SignificanceProfile& profile, std::size_t top_channels) {
  Json out;
  out["dataset"] = profile.dataset;
  out["tokens"] = profile.token_count;
  out["empty_layers"] = profile.empty_layers;
  Json layers = Json::array();
  for (std::size_t l = 0; l < profile.expert.size(); ++l) {
    Json layer;
    layer["layer"] = l;
    layer["expert_significance"] = profile.expert[l];
    layer["token_share"] = profile.token_share[l];
    if (profile.channel.layers() > l && top_channels > 0) {
      struct Hit {
        std::uint32_t expert, channel;
        double value;
      };
      std::vector<Hit> hits;
      for (std::uint32_t e = 0; e < profile.channel.experts(); ++e) {
        const auto row = profile.channel.expert(static_cast<std::uint32_t>(l), e);
        for (std::uint32_t c = 0; c < row.size(); ++c) hits.push_back({e, c, row[c]});
      }
      const std::size_t keep = std::min(top_channels, hits.size());
      std::partial_sort(hits.begin(), hits.begin() + keep, hits.end(), [](const Hit& a, const Hit& b) {
        return a.value > b.value || (a.value == b.value && (a.expert < b.expert ||
                                                            (a.expert == b.expert && a.channel < b.channel)));
      });
      Json top = Json::array();
      for (std::size_t i = 0; i < keep; ++i)
        top.push_back({{"expert", hits[i].expert}, {"channel", hits[i].channel}, {"significance", hits[i].value}});
      layer["top_channels"] = top;
    }
    layers.push_back(layer);
  }
  out["layers"] = layers;
  return out;
}

Json joint_json(const JointProfile& joint) {
  Json out;
  out["datasets"] = joint.datasets;
  out["weights"] = joint.weights;
  out["synthesized"] = joint.synthesized;
  out["token_share"] = joint.token_share;
  return out;
}

Json assignment_json(const std::vector<LayerClustering>& layers, const QuantizedModel& qmodel) {
  Json out;
  out["average_bits"] = qmodel.average_bits();
  out["payload_bytes"] = qmodel.payload_bytes();
  out["width_counts"] = width_histogram(qmodel);
  Json arr = Json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lc = layers[l];
    Json layer;
    layer["layer"] = l;
    layer["centers"] = lc.fcm.centers;
    layer["cluster_bits"] = widths_json(lc.assignment.cluster_widths);
    layer["iterations"] = lc.fcm.iterations;
    layer["converged"] = lc.fcm.converged;
    layer["bits"] = widths_json(lc.assignment.widths);
    layer["primary_cluster"] = lc.assignment.primary;
    Json memberships = Json::array();
    for (std::size_t e = 0; e < lc.fcm.memberships.points(); ++e) {
      const auto row = lc.fcm.memberships.row(e);
      memberships.push_back(std::vector<double>(row.begin(), row.end()));
    }
    layer["memberships"] = memberships;
    std::vector<std::uint32_t> boundary;
    for (std::uint32_t e = 0; e < lc.assignment.boundary.size(); ++e)
      if (lc.assignment.boundary[e]) boundary.push_back(e);
    layer["boundary_experts"] = boundary;
    arr.push_back(layer);
  }
  out["layers"] = arr;
  return out;
}

Json timings_json(const PhaseTimings& timings) {
  Json out;
  out["total_seconds"] = timings.total_seconds();
  Json stages = Json::array();
  for (const auto& s : timings.stages)
    stages.push_back({{"stage", s.stage}, {"seconds", s.seconds}, {"fraction", s.fraction}});
  out["stages"] = stages;
  return out;
}

Json fidelity_json(const FidelityReport& report) {
  return Json{{"relative_l2", report.relative_l2},
              {"per_layer", report.per_layer},
              {"average_bits", report.average_bits},
              {"tokens", report.tokens}};
}

Json traffic_json(const TrafficReport& report) {
  return Json{{"tokens", report.tokens},
              {"quantized_bytes", report.quantized_bytes},
              {"baseline_bytes", report.baseline_bytes},
              {"ratio", report.ratio}};
}

Json plan_json(const SwitchPlan& plan) {
  Json out;
  out["changed_experts"] = plan.changed_count();
  Json changes = Json::array();
  for (std::size_t l = 0; l < plan.experts.size(); ++l)
    for (std::size_t e = 0; e < plan.experts[l].size(); ++e) {
      const auto& sw = plan.experts[l][e];
      if (sw.changed)
        changes.push_back({{"layer", l}, {"expert", e}, {"from_bits", sw.old_width.bits()},
                           {"to_bits", sw.new_width.bits()}});
    }
  out["changes"] = changes;
  return out;
}

Json ablation_json(const AblationTable& table) {
  Json rows = Json::array();
  for (const auto& r : table.rows) {
    Json row;
    row["name"] = r.name;
    row["average_bits"] = r.average_bits;
    row["error_calibration"] = r.error_calibration ? Json(*r.error_calibration) : Json(nullptr);
    row["error_shift"] = r.error_shift ? Json(*r.error_shift) : Json(nullptr);
    row["changed_experts"] = r.changed_experts;
    rows.push_back(row);
  }
  return Json{{"rows", rows}};
}

Json qmodel_json(const QuantizedModel& qmodel) {
  const auto& c = qmodel.config;
  Json out;
  out["config"] = {{"num_layers", c.num_layers},   {"experts_per_layer", c.experts_per_layer},
                   {"hidden_dim", c.hidden_dim},   {"ffn_dim", c.ffn_dim},
                   {"top_k", c.top_k},             {"vocab_size", c.vocab_size}};
  out["average_bits"] = qmodel.average_bits();
  out["payload_bytes"] = qmodel.payload_bytes();
  out["width_counts"] = width_histogram(qmodel);
  Json bits = Json::array();
  std::size_t overrides = 0;
  for (const auto& layer : qmodel.experts) {
    Json row = Json::array();
    for (const auto& e : layer) {
      row.push_back(e.baseline.bits());
      overrides += e.overrides.size();
    }
    bits.push_back(row);
  }
  out["baseline_bits"] = bits;
  out["override_channels"] = overrides;
  if (qmodel.cache) {
    out["cache"] = {{"entries", qmodel.cache->size()},
                    {"bytes", qmodel.cache->byte_size()},
                    {"fraction_of_payload", static_cast<double>(qmodel.cache->byte_size()) /
                                                static_cast<double>(qmodel.payload_bytes())}};
  } else {
    out["cache"] = nullptr;
  }
  const auto bytes = encode_qmodel(qmodel);
  out["file_bytes"] = bytes.size();
  return out;
}

}  // namespace moeq
