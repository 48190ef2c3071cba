#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "moeq/error.hpp"
#include "moeq/float16.hpp"
#include "moeq/formats.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace moeq;

namespace {

// A plan that moves exactly the listed experts to new widths.
SwitchPlan manual_plan(const QuantizedModel& q, const std::vector<std::tuple<std::uint32_t, std::uint32_t, BitWidth>>& moves) {
  SwitchPlan plan;
  for (const auto& layer : q.experts) {
    plan.experts.emplace_back();
    for (const auto& e : layer) plan.experts.back().push_back({e.baseline, e.baseline, false});
  }
  for (const auto& [l, e, w] : moves) plan.experts[l][e] = {q.experts[l][e].baseline, w, w != q.experts[l][e].baseline};
  return plan;
}

std::map<std::string, std::vector<std::uint8_t>> sections_of(const QuantizedModel& q) {
  std::vector<Section> sections;
  const auto bytes = encode_qmodel(q, &sections);
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& s : sections)
    out[s.name].assign(bytes.begin() + static_cast<std::ptrdiff_t>(s.offset),
                       bytes.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size));
  return out;
}

double channel_error(const ExpertWeights& ref, const QuantizedChannel& ch, std::size_t channel) {
  const auto want = channel_values(ref, channel);
  const auto got = dequantize(ch);
  double sq = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) sq += (static_cast<double>(want[i]) - got[i]) * (static_cast<double>(want[i]) - got[i]);
  return sq;
}

}  // namespace

TEST_CASE("entries per expert") {
  CHECK(cache_entries_per_expert(100) == 1);
  CHECK(cache_entries_per_expert(101) == 2);
  CHECK(cache_entries_per_expert(256) == 3);
  CHECK(cache_entries_per_expert(1000, 0.01) == 10);
  CHECK_THROWS_AS(cache_entries_per_expert(100, 0.0), ConfigError);
}

TEST_CASE("single-dataset cache falls back to the lowest channel indices") {
  const MoEConfig cfg{2, 3, 4, 100, 1, 10};
  const MoEModel m = oracle::random_model(cfg, 5);
  const SignificanceProfile p[] = {analyze(m, oracle::random_stream(cfg, 40, 6))};
  const auto cache = build_cache(m, synthesize_joint(p));
  CHECK(cache.size() == 6);
  for (const auto& e : cache.entries()) CHECK(e.channel == 0);
}

TEST_CASE("desk cache layout") {
  const auto& d = fixtures::desk();
  const auto& cache = *d.offline.qmodel.cache;
  const auto& cfg = d.model.config;
  CHECK(cache.size() == cfg.num_layers * cfg.experts_per_layer * 3);
  std::uint64_t bytes = 0;
  std::set<std::tuple<int, int, int>> keys;
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l)
    for (std::uint32_t e = 0; e < cfg.experts_per_layer; ++e) CHECK(cache.entries_for(l, e).size() == 3);
  for (const auto& entry : cache.entries()) {
    CHECK(keys.insert({entry.layer, entry.expert, entry.channel}).second);
    bytes += 8 + 2 * entry.values.size();
    const auto ref = channel_values(d.model.layers[entry.layer].experts[entry.expert], entry.channel);
    REQUIRE(entry.values.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(entry.values[i] == float_to_half(ref[i]));
    // Selected channels carry the top dynamics of their expert.
    const auto scores = d.offline.joint.dynamics.expert(entry.layer, entry.expert);
    std::size_t above = 0;
    for (double s : scores) above += s > scores[entry.channel] ? 1 : 0;
    CHECK(above < 3);
  }
  CHECK(cache.byte_size() == bytes);
  ChannelCache dup;
  dup.insert(cache.entries()[0]);
  CHECK_THROWS_AS(dup.insert(cache.entries()[0]), ConsistencyError);
}

TEST_CASE("replacement exposes cached channels") {
  const auto& d = fixtures::desk();
  const auto& q = d.offline.qmodel;
  CHECK(replace_channels(q, ChannelCache{}).empty());

  ChannelCache one;
  ChannelCacheEntry entry = *std::find_if(q.cache->entries().begin(), q.cache->entries().end(),
                                          [](const auto& e) { return e.layer == 0 && e.expert == 28; });
  one.insert(entry);
  const auto replaced = replace_channels(q, one);
  REQUIRE(replaced.size() == 1);
  CHECK(replaced.begin()->first == ChannelKey{0, 28, entry.channel});

  // Requantizing at the original width moves codes by at most one step.
  for (const auto& [key, values] : replace_channels(q, *q.cache)) {
    const auto& [l, e, c] = key;
    const auto& original = q.experts[l][e].channels[c];
    const auto codes = unpack_row(original.row);
    const auto again = quantize_channel(values, original.codec);
    for (std::size_t i = 0; i < codes.size(); ++i) CHECK(std::abs(codes[i] - again[i]) <= 1);
  }

  ChannelCache bad;
  ChannelCacheEntry out_of_range = entry;
  out_of_range.channel = d.model.config.ffn_dim;
  bad.insert(out_of_range);
  CHECK_THROWS_AS(replace_channels(q, bad), ConsistencyError);
}

TEST_CASE("planning against the calibration mixture changes nothing") {
  const auto& d = fixtures::desk();
  const auto plan = plan_switch(baseline_widths(d.offline.qmodel), d.offline.joint.as_profile(), FcmParams{},
                                kDefaultBoundaryDelta);
  CHECK(plan.changed_count() == 0);
  const auto switched = apply_switch(d.offline.qmodel, *d.offline.qmodel.cache, plan);
  CHECK(encode_qmodel(switched) == encode_qmodel(d.offline.qmodel));
  const auto s = oracle::random_stream(d.model.config, 128, 3);
  CHECK(forward_quantized(switched, s) == forward_quantized(d.offline.qmodel, s));
}

TEST_CASE("an expert demoted from the top cluster is planned down") {
  // 32 experts in four tight groups; expert 28 sits with the most significant
  // group in the baseline and with the second-lowest group in the new profile.
  std::vector<double> x(32);
  for (std::size_t i = 0; i < 32; ++i) x[i] = 0.01 + 0.01 * static_cast<double>(i % 4) + 1e-5 * static_cast<double>(i);
  x[28] = 0.04;
  // Token shares seed the initial memberships; let them follow significance.
  const auto shares_of = [](std::vector<double> v) {
    double t = 0.0;
    for (double s : v) t += s;
    for (double& s : v) s /= t;
    return v;
  };
  const auto base = cluster_layers({x}, {shares_of(x)}, FcmParams{}, 0.0);
  REQUIRE(base[0].assignment.widths[28].bits() == 8);
  SignificanceProfile next;
  next.expert = {x};
  next.expert[0][28] = 0.02 + 2e-5;
  next.token_share = {shares_of(next.expert[0])};
  const auto plan = plan_switch(width_table(base), next, FcmParams{}, 0.0);
  CHECK(plan.experts[0][28].old_width.bits() == 8);
  CHECK(plan.experts[0][28].new_width.bits() == 4);
  CHECK(plan.experts[0][28].changed);
  for (std::size_t e = 0; e < 32; ++e)
    CHECK(plan.experts[0][e].changed == (plan.experts[0][e].old_width != plan.experts[0][e].new_width));

  // A perturbation far below the clustering tolerance yields the same plan.
  auto nudged = next;
  for (double& v : nudged.expert[0]) v += 1e-15;
  const auto again = plan_switch(width_table(base), nudged, FcmParams{}, 0.0);
  for (std::size_t e = 0; e < 32; ++e) CHECK(again.experts[0][e].new_width == plan.experts[0][e].new_width);
}

TEST_CASE("applying a switch") {
  const auto& d = fixtures::desk();
  const auto& q = d.offline.qmodel;
  const auto& cache = *q.cache;
  const BitWidth from = q.experts[1][3].baseline;
  const BitWidth to = from == BitWidth::int8() ? BitWidth::int4() : BitWidth::int8();
  const auto plan_a = manual_plan(q, {{1, 3, to}});
  const auto a = apply_switch(q, cache, plan_a);

  SUBCASE("override bookkeeping") {
    const auto& ex = a.experts[1][3];
    CHECK(ex.overrides.size() == 3);
    for (std::size_t idx : cache.entries_for(1, 3)) CHECK(ex.overrides.at(cache.entries()[idx].channel).width() == to);
    for (std::uint32_t c = 0; c < d.model.config.ffn_dim; ++c)
      if (!ex.overrides.count(c)) CHECK(ex.effective(c).width() == from);
    for (std::size_t l = 0; l < a.experts.size(); ++l)
      for (std::size_t e = 0; e < a.experts[l].size(); ++e)
        if (!(l == 1 && e == 3)) CHECK(a.experts[l][e] == q.experts[l][e]);
  }
  SUBCASE("idempotent") {
    CHECK(encode_qmodel(apply_switch(a, cache, plan_a)) == encode_qmodel(a));
  }
  SUBCASE("A then B then A") {
    BitWidth other = BitWidth::int2();
    for (BitWidth w : kAllWidths)
      if (w != from && w != to) other = w;
    const auto plan_b = manual_plan(q, {{1, 3, other}, {2, 7, to}});
    const auto b = apply_switch(a, cache, plan_b);
    CHECK(b.experts[1][3].overrides.begin()->second.width() == other);
    const auto back = apply_switch(b, cache, plan_a);
    CHECK(encode_qmodel(back) == encode_qmodel(a));
  }
  SUBCASE("only override sections change") {
    const auto before = sections_of(q);
    const auto after = sections_of(a);
    REQUIRE(before.size() == after.size());
    for (const auto& [name, bytes] : before) {
      if (name == "overrides 1.3") {
        CHECK(after.at(name) != bytes);
      } else {
        INFO(name);
        CHECK(after.at(name) == bytes);
      }
    }
  }
  SUBCASE("raising precision lowers the error of cached channels") {
    std::vector<std::tuple<std::uint32_t, std::uint32_t, BitWidth>> moves;
    for (std::uint32_t e = 0; e < d.model.config.experts_per_layer; ++e)
      if (q.experts[0][e].baseline != BitWidth::int8()) moves.emplace_back(0, e, BitWidth::int8());
    REQUIRE_FALSE(moves.empty());
    const auto up = apply_switch(q, cache, manual_plan(q, moves));
    for (const auto& [l, e, w] : moves)
      for (std::size_t idx : cache.entries_for(l, e)) {
        const auto c = cache.entries()[idx].channel;
        const auto& ref = d.model.layers[l].experts[e];
        CHECK(channel_error(ref, up.experts[l][e].overrides.at(c), c) <
              channel_error(ref, q.experts[l][e].channels[c], c));
      }
  }
  SUBCASE("inconsistent inputs") {
    ChannelCache partial;
    for (const auto& entry : cache.entries())
      if (!(entry.layer == 1 && entry.expert == 3)) partial.insert(entry);
    CHECK_THROWS_AS(apply_switch(q, partial, plan_a), ConsistencyError);
    auto wrong = plan_a;
    wrong.experts[0][0].old_width = wrong.experts[0][0].old_width == BitWidth::int2() ? BitWidth::int4() : BitWidth::int2();
    CHECK_THROWS_AS(apply_switch(q, cache, wrong), ConsistencyError);
  }
  SUBCASE("unchanged experts drop stale overrides") {
    const auto cleared = apply_switch(a, cache, manual_plan(q, {}));
    CHECK(encode_qmodel(cleared) == encode_qmodel(q));
  }
}
