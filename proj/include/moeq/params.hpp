#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "moeq/clustering.hpp"
#include "moeq/switching.hpp"

namespace moeq {

struct PipelineParams {
  FcmParams fcm;
  double boundary_delta = kDefaultBoundaryDelta;
  double cache_fraction = kDefaultCacheFraction;
  // Prefix of the new stream used to profile it before switching.
  std::uint32_t probe_tokens = 512;

  void validate() const;
};

// "key = value" lines; '#' starts a comment. Recognized keys:
//   fcm.c, fcm.m, fcm.epsilon, fcm.max_iters, boundary.delta, cache.fraction,
//   online.probe_tokens
// Throws ConfigError on unknown keys or malformed values.
PipelineParams parse_params(const std::string& text);
PipelineParams load_params(const std::filesystem::path& path);

}  // namespace moeq
