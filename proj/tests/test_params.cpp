#include <doctest.h>

#include <filesystem>

#include "moeq/error.hpp"
#include "moeq/params.hpp"

using namespace moeq;

TEST_CASE("defaults") {
  const PipelineParams p = parse_params("");
  CHECK(p.fcm.clusters == 4);
  CHECK(p.fcm.fuzzifier == 2.0);
  CHECK(p.fcm.epsilon == 1e-6);
  CHECK(p.fcm.max_iters == 300);
  CHECK(p.boundary_delta == 0.10);
  CHECK(p.cache_fraction == 0.01);
  CHECK(p.probe_tokens == 512);
}

TEST_CASE("every key parses") {
  const auto p = parse_params(
      "# tuning\n"
      "fcm.m = 1.5\n"
      "  fcm.epsilon=1e-8   # tighter\n"
      "fcm.max_iters = 50\r\n"
      "\n"
      "boundary.delta = 0.2\n"
      "cache.fraction = 0.05\n"
      "online.probe_tokens = 64\n"
      "fcm.c = 4\n");
  CHECK(p.fcm.fuzzifier == 1.5);
  CHECK(p.fcm.epsilon == 1e-8);
  CHECK(p.fcm.max_iters == 50);
  CHECK(p.boundary_delta == 0.2);
  CHECK(p.cache_fraction == 0.05);
  CHECK(p.probe_tokens == 64);
}

TEST_CASE("rejections") {
  CHECK_THROWS_AS(parse_params("fcm.q = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("fcm.m\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("fcm.m = two\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("fcm.m = 2x\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("fcm.m = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("fcm.epsilon = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("boundary.delta = -0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("cache.fraction = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("cache.fraction = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_params("online.probe_tokens = 0\n"), ConfigError);
  CHECK_THROWS_AS(load_params(std::filesystem::temp_directory_path() / "no_such_params_file.cfg"), InputError);
}
