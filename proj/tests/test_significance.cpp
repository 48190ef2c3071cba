#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "moeq/error.hpp"
#include "oracles.hpp"

using namespace moeq;

namespace {

const MoEModel& desk_model() {
  static const MoEModel m = desk_experiment(42).model();
  return m;
}

SignificanceProfile profile_from(std::vector<std::vector<double>> expert, std::string name, std::uint64_t tokens,
                                 std::uint32_t channels = 2) {
  SignificanceProfile p;
  p.dataset = std::move(name);
  p.token_count = tokens;
  const auto layers = static_cast<std::uint32_t>(expert.size());
  const auto n = static_cast<std::uint32_t>(expert[0].size());
  p.channel = ChannelTensor(layers, n, channels);
  for (std::uint32_t l = 0; l < layers; ++l)
    for (std::uint32_t e = 0; e < n; ++e)
      for (std::uint32_t c = 0; c < channels; ++c) p.channel.at(l, e, c) = expert[l][e] / channels;
  p.token_share = expert;
  p.expert = std::move(expert);
  return p;
}

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::exponential_distribution<double> dist(1.0);
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) s += x = dist(rng);
  for (auto& x : v) x /= s;
  return v;
}

}  // namespace

TEST_CASE("token utilization counts") {
  const MoEConfig cfg{1, 3, 4, 2, 2, 10};
  const MoEModel m = oracle::random_model(cfg, 1);
  const TokenStream s{"s", {5, 5, 7}};
  const auto u = token_utilization(s, forward(m, s).routing);
  REQUIRE(u.counts.size() == 2);
  CHECK(u.find(5)->dispatches == 4);
  CHECK(u.find(7)->dispatches == 2);
  CHECK(u.find(5)->occurrences == 2);
  CHECK(u.find(6) == nullptr);
  CHECK(u.ranking == std::vector<std::uint32_t>{5, 7});
}

TEST_CASE("uniform stream ranks by token id") {
  const MoEConfig cfg{2, 3, 4, 2, 2, 10};
  const MoEModel m = oracle::random_model(cfg, 1);
  TokenStream s{"s", {9, 3, 0, 4, 1, 8, 2, 7, 6, 5}};
  const auto u = token_utilization(s, forward(m, s).routing);
  for (std::uint32_t t = 0; t < 10; ++t) CHECK(u.ranking[t] == t);
  for (const auto& c : u.counts) CHECK(c.dispatches == 4);
}

TEST_CASE("token utilization matches a recount of the routing record") {
  const auto& m = desk_model();
  const DeskExperiment x = desk_experiment(42);
  const double mix[] = {0.9, 0.1};
  const auto s = x.stream(mix, 700, 1, "skewed");
  const auto routing = forward(m, s).routing;
  const auto u = token_utilization(s, routing);
  std::map<std::uint32_t, std::uint64_t> dispatch;
  for (std::uint32_t l = 0; l < routing.num_layers(); ++l)
    for (std::size_t p = 0; p < s.size(); ++p) dispatch[s.tokens[p]] += routing.experts(l, p).size();
  REQUIRE(u.counts.size() == dispatch.size());
  for (const auto& c : u.counts) CHECK(c.dispatches == dispatch.at(c.token));
  for (std::size_t i = 1; i < u.ranking.size(); ++i) {
    const auto a = u.find(u.ranking[i - 1]);
    const auto b = u.find(u.ranking[i]);
    CHECK((a->dispatches > b->dispatches || (a->dispatches == b->dispatches && a->token < b->token)));
  }
  CHECK_THROWS_AS(token_utilization(TokenStream{"short", {1}}, routing), InputError);
}

TEST_CASE("channel significance support") {
  SUBCASE("zero experts") {
    const MoEConfig cfg{2, 3, 4, 5, 2, 10};
    MoEModel m = MoEModel::zeros(cfg);
    m.embeddings = oracle::random_model(cfg, 2).embeddings;
    const auto sig = channel_significance(m, oracle::random_stream(cfg, 20, 1));
    for (double v : sig.values()) CHECK(v == 0.0);
  }
  SUBCASE("single token, single layer, K = 1") {
    const MoEConfig cfg{1, 4, 6, 5, 1, 10};
    MoEModel m = oracle::random_model(cfg, 3, 1.0f);
    const TokenStream s{"one", {3}};
    const auto routed = forward(m, s).routing.experts(0, 0)[0];
    const auto sig = channel_significance(m, s);
    double routed_mass = 0.0;
    for (std::uint32_t e = 0; e < cfg.experts_per_layer; ++e)
      for (double v : sig.expert(0, e)) {
        if (e != routed) CHECK(v == 0.0);
        else routed_mass += v;
      }
    CHECK(routed_mass > 0.0);
  }
}

TEST_CASE("channel significance equals the materialized oracle") {
  const auto& m = desk_model();
  const auto s = oracle::random_stream(m.config, 256, 77);
  const auto sig = channel_significance(m, s);
  const auto want = oracle::materialized_significance(m, s);
  REQUIRE(sig.same_shape(want));
  double worst = 0.0;
  for (std::size_t i = 0; i < sig.values().size(); ++i) {
    const double a = sig.values()[i];
    const double b = want.values()[i];
    const double denom = std::max(std::fabs(b), 1e-300);
    if (a != b) worst = std::max(worst, std::fabs(a - b) / denom);
  }
  CHECK(worst <= 1e-7);
}

TEST_CASE("parallel significance matches serial") {
  const auto& m = desk_model();
  const auto s = oracle::random_stream(m.config, 900, 78);
  const auto a = analyze(m, s, Execution::serial);
  const auto b = analyze(m, s, Execution::parallel);
  CHECK(a.channel == b.channel);
  CHECK(a.expert == b.expert);
}

TEST_CASE("expert significance normalization") {
  SUBCASE("one expert holds all mass") {
    ChannelTensor t(1, 4, 3);
    t.at(0, 2, 1) = 5.0;
    const auto s = expert_significance(t);
    CHECK(s.values[0] == std::vector<double>{0.0, 0.0, 1.0, 0.0});
  }
  SUBCASE("equal mass") {
    ChannelTensor t(2, 5, 3);
    for (auto& v : t.values()) v = 0.7;
    for (const auto& row : expert_significance(t).values)
      for (double v : row) CHECK(v == doctest::Approx(0.2));
  }
  SUBCASE("random tensors sum to one and ignore layer scale") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
      ChannelTensor t(3, 8, 6);
      for (auto& v : t.values()) v = u(rng);
      const auto s = expert_significance(t);
      ChannelTensor scaled = t;
      for (std::uint32_t e = 0; e < 8; ++e)
        for (double& v : scaled.expert(1, e)) v *= 123.5;
      const auto s2 = expert_significance(scaled);
      for (std::size_t l = 0; l < 3; ++l) {
        double sum = 0.0;
        for (std::size_t e = 0; e < 8; ++e) {
          sum += s.values[l][e];
          CHECK(s2.values[l][e] == doctest::Approx(s.values[l][e]).epsilon(1e-12));
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-9);
      }
    }
  }
  SUBCASE("empty layers fall back to uniform") {
    ChannelTensor t(2, 4, 2);
    t.at(1, 0, 0) = 1.0;
    const auto s = expert_significance(t);
    CHECK(s.empty_layers == std::vector<std::uint32_t>{0});
    for (double v : s.values[0]) CHECK(v == 0.25);
  }
  SUBCASE("negative input") {
    ChannelTensor t(1, 2, 2);
    t.at(0, 0, 0) = -1.0;
    CHECK_THROWS_AS(expert_significance(t), InputError);
  }
}

TEST_CASE("expert significance is permutation equivariant") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ChannelTensor t(1, 6, 4);
  for (auto& v : t.values()) v = u(rng);
  const std::vector<std::uint32_t> perm = {3, 0, 5, 1, 4, 2};
  ChannelTensor p(1, 6, 4);
  for (std::uint32_t e = 0; e < 6; ++e)
    for (std::uint32_t c = 0; c < 4; ++c) p.at(0, perm[e], c) = t.at(0, e, c);
  const auto a = expert_significance(t).values[0];
  const auto b = expert_significance(p).values[0];
  for (std::uint32_t e = 0; e < 6; ++e) CHECK(b[perm[e]] == doctest::Approx(a[e]).epsilon(1e-14));
}

TEST_CASE("joint synthesis") {
  SUBCASE("single profile") {
    const auto p = analyze(desk_model(), oracle::random_stream(desk_model().config, 128, 3));
    const SignificanceProfile one[] = {p};
    const auto j = synthesize_joint(one);
    CHECK(j.synthesized == p.expert);
    for (double v : j.dynamics.values()) CHECK(v == 0.0);
  }
  SUBCASE("two datasets with equal weights") {
    std::vector<double> a(32, 0.45 / 31), b(32, 0.92 / 31);
    a[28] = 0.55;
    b[28] = 0.08;
    const SignificanceProfile ps[] = {profile_from({a}, "wiki", 100), profile_from({b}, "web", 300)};
    const auto j = synthesize_joint(ps, std::vector<double>{1.0, 1.0});
    CHECK(j.synthesized[0][28] == doctest::Approx(0.315).epsilon(1e-12));
    double sum = 0.0;
    for (double v : j.synthesized[0]) sum += v;
    CHECK(std::fabs(sum - 1.0) <= 1e-9);
    CHECK(j.per_dataset[0][28] == std::vector<double>{0.55, 0.08});
    // Default weights follow token counts.
    const auto by_tokens = synthesize_joint(ps);
    CHECK(by_tokens.synthesized[0][28] == doctest::Approx(0.25 * 0.55 + 0.75 * 0.08));
  }
  SUBCASE("identical profiles under any weights have zero dynamics") {
    const auto p = analyze(desk_model(), oracle::random_stream(desk_model().config, 128, 4));
    const SignificanceProfile ps[] = {p, p, p};
    const auto j = synthesize_joint(ps, std::vector<double>{0.2, 3.0, 1.1});
    for (double v : j.dynamics.values()) CHECK(std::fabs(v) <= 1e-24);
  }
  SUBCASE("convexity and normalization on random profiles") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<SignificanceProfile> ps;
      for (int d = 0; d < 3; ++d)
        ps.push_back(profile_from({random_simplex(rng, 10), random_simplex(rng, 10)}, "d" + std::to_string(d),
                                  50 + rng() % 100));
      const auto j = synthesize_joint(ps);
      for (std::size_t l = 0; l < 2; ++l) {
        double sum = 0.0;
        for (std::size_t e = 0; e < 10; ++e) {
          double lo = 1.0, hi = 0.0;
          for (const auto& p : ps) {
            lo = std::min(lo, p.expert[l][e]);
            hi = std::max(hi, p.expert[l][e]);
          }
          CHECK(j.synthesized[l][e] >= lo - 1e-15);
          CHECK(j.synthesized[l][e] <= hi + 1e-15);
          sum += j.synthesized[l][e];
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-9);
      }
      for (double v : j.dynamics.values()) CHECK(v >= 0.0);
    }
  }
  SUBCASE("errors") {
    const auto a = profile_from({{0.5, 0.5}}, "a", 1);
    const auto b = profile_from({{0.2, 0.3, 0.5}}, "b", 1);
    const SignificanceProfile mismatched[] = {a, b};
    CHECK_THROWS_AS(synthesize_joint(mismatched), InputError);
    const SignificanceProfile two[] = {a, a};
    CHECK_THROWS_AS(synthesize_joint(two, std::vector<double>{-1.0, 2.0}), InputError);
    CHECK_THROWS_AS(synthesize_joint(two, std::vector<double>{0.0, 0.0}), InputError);
    CHECK_THROWS_AS(synthesize_joint(std::span<const SignificanceProfile>{}), InputError);
  }
}

TEST_CASE("shifting the group mix moves the top-significance experts") {
  const DeskExperiment x = desk_experiment(42);
  const auto& m = desk_model();
  const double a[] = {0.9, 0.1};
  const double b[] = {0.1, 0.9};
  const auto pa = analyze(m, x.stream(a, 2048, 1, "a"));
  const auto pb = analyze(m, x.stream(b, 2048, 2, "b"));
  const auto top = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] > v[j]; });
    idx.resize(3);
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  bool differs = false;
  for (std::size_t l = 0; l < pa.expert.size(); ++l) differs |= top(pa.expert[l]) != top(pb.expert[l]);
  CHECK(differs);
}
