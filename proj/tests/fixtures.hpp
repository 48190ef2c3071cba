#pragma once

#include "moeq/harness.hpp"

namespace fixtures {

// The pinned seed-42 experiment, built once per test binary.
struct Desk {
  moeq::DeskExperiment experiment = moeq::desk_experiment(42);
  moeq::MoEModel model = experiment.model();
  std::vector<moeq::TokenStream> calibration = experiment.calibration();
  moeq::TokenStream shift = experiment.shift();
  moeq::OfflineResult offline = moeq::run_offline(model, calibration, moeq::PipelineParams{});
};

inline const Desk& desk() {
  static const Desk d;
  return d;
}

}  // namespace fixtures
