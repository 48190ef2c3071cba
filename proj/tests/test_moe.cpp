#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <mutex>

#include "moeq/error.hpp"
#include "oracles.hpp"

using namespace moeq;

namespace {

struct DeskFixture {
  MoEModel model = desk_experiment(42).model();
  TokenStream stream64 = oracle::random_stream(model.config, 64, 5);
};

const DeskFixture& desk() {
  static const DeskFixture f;
  return f;
}

}  // namespace

TEST_CASE("single expert routing") {
  const MoEConfig cfg{3, 1, 8, 4, 1, 10};
  const MoEModel m = oracle::random_model(cfg, 1);
  const auto s = oracle::random_stream(cfg, 20, 2);
  const auto res = forward(m, s);
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l)
    for (std::size_t p = 0; p < s.size(); ++p) {
      CHECK(res.routing.experts(l, p)[0] == 0u);
      CHECK(res.routing.gates(l, p)[0] == 1.0f);
    }
}

TEST_CASE("zero experts leave the embeddings untouched") {
  const MoEConfig cfg{2, 4, 8, 6, 2, 10};
  MoEModel m = oracle::random_model(cfg, 3);
  for (auto& l : m.layers)
    for (auto& e : l.experts) {
      for (auto& v : e.w_in.values()) v = 0.0f;
      for (auto& v : e.w_out.values()) v = 0.0f;
    }
  const auto s = oracle::random_stream(cfg, 30, 4);
  const auto res = forward(m, s);
  for (std::size_t p = 0; p < s.size(); ++p)
    for (std::size_t c = 0; c < cfg.hidden_dim; ++c) CHECK(res.hidden(p, c) == m.embeddings(s.tokens[p], c));
}

TEST_CASE("routing matches a brute-force top-K over router logits") {
  const auto& f = desk();
  const auto res = forward(f.model, f.stream64);
  for (std::uint32_t l = 0; l < f.model.config.num_layers; ++l)
    for (std::size_t p = 0; p < f.stream64.size(); ++p) {
      const auto want = oracle::brute_top_k(f.model.layers[l].router, f.model.embeddings.row(f.stream64.tokens[p]),
                                            f.model.config.top_k);
      const auto experts = res.routing.experts(l, p);
      const auto gates = res.routing.gates(l, p);
      for (std::size_t k = 0; k < want.experts.size(); ++k) {
        CHECK(experts[k] == want.experts[k]);
        CHECK(gates[k] == doctest::Approx(want.gates[k]).epsilon(1e-6));
      }
    }
}

TEST_CASE("ties go to the lower expert index") {
  const MoEConfig cfg{1, 4, 2, 3, 2, 1};
  MoEModel m = MoEModel::zeros(cfg);
  m.embeddings(0, 0) = 1.0f;
  for (std::uint32_t j = 0; j < 4; ++j) m.layers[0].router(j, 0) = j == 0 ? 0.5f : 1.0f;
  TokenStream s{"t", {0}};
  const auto r = forward(m, s).routing;
  CHECK(r.experts(0, 0)[0] == 1u);
  CHECK(r.experts(0, 0)[1] == 2u);
  CHECK(r.gates(0, 0)[0] == 0.5f);
}

TEST_CASE("gates are a distribution over distinct experts") {
  const MoEConfig cfg{2, 7, 8, 4, 3, 50};
  const MoEModel m = oracle::random_model(cfg, 11);
  const auto s = oracle::random_stream(cfg, 200, 12);
  const auto r = forward(m, s).routing;
  for (std::uint32_t l = 0; l < 2; ++l)
    for (std::size_t p = 0; p < s.size(); ++p) {
      double sum = 0.0;
      for (float g : r.gates(l, p)) {
        CHECK(g >= 0.0f);
        sum += g;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-6);
      std::vector<std::uint32_t> e(r.experts(l, p).begin(), r.experts(l, p).end());
      std::sort(e.begin(), e.end());
      CHECK(std::adjacent_find(e.begin(), e.end()) == e.end());
    }
}

TEST_CASE("serial and parallel kernels are bit-identical") {
  const auto& f = desk();
  const auto s = oracle::random_stream(f.model.config, 1000, 9);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(4);
  const auto par = forward(f.model, s, nullptr, Execution::parallel);
  omp_set_num_threads(saved);
  const auto ser = forward(f.model, s, nullptr, Execution::serial);
  CHECK(par.routing == ser.routing);
  CHECK(par.hidden == ser.hidden);
  const auto q = quantize_uniform(f.model, BitWidth::int4());
  CHECK(forward_quantized(q, s, Execution::serial) == forward_quantized(q, s, Execution::parallel));
}

TEST_CASE("observers never change the output and see every channel once") {
  const auto& f = desk();
  std::mutex mu;
  std::size_t events = 0;
  const ChannelObserver obs = [&](const ChannelEvent& e) {
    CHECK(e.magnitude >= 0.0);
    std::lock_guard lock(mu);
    ++events;
  };
  const auto with = forward(f.model, f.stream64, &obs);
  const auto without = forward(f.model, f.stream64);
  CHECK(with.hidden == without.hidden);
  CHECK(with.routing == without.routing);
  const auto& c = f.model.config;
  CHECK(events == f.stream64.size() * c.num_layers * c.top_k * c.ffn_dim);
}

TEST_CASE("forward is deterministic and layer states end in the final hidden state") {
  const auto& f = desk();
  const auto a = forward(f.model, f.stream64);
  const auto b = forward(f.model, f.stream64);
  CHECK(a.hidden == b.hidden);
  const auto states = layer_states(f.model, f.stream64);
  REQUIRE(states.size() == f.model.config.num_layers);
  CHECK(states.back() == a.hidden);
}

TEST_CASE("invalid streams") {
  const auto& f = desk();
  CHECK_THROWS_AS(forward(f.model, TokenStream{"x", {1024}}), InputError);
  CHECK_THROWS_AS(forward(f.model, TokenStream{"x", {}}), InputError);
}

TEST_CASE("quantized forward") {
  SUBCASE("zero model at eight bits is exact") {
    const MoEConfig cfg{2, 4, 8, 6, 2, 10};
    MoEModel m = oracle::random_model(cfg, 3);
    for (auto& l : m.layers)
      for (auto& e : l.experts) {
        for (auto& v : e.w_in.values()) v = 0.0f;
        for (auto& v : e.w_out.values()) v = 0.0f;
      }
    const auto s = oracle::random_stream(cfg, 30, 4);
    CHECK(forward_quantized(quantize_uniform(m, BitWidth::int8()), s) == forward(m, s).hidden);
  }
  SUBCASE("desk model at eight bits stays close") {
    const auto& f = desk();
    const auto q = quantize_uniform(f.model, BitWidth::int8());
    const auto ref = forward(f.model, f.stream64);
    CHECK(relative_l2(forward_quantized(q, f.stream64), ref.hidden) < 3e-2);
    CHECK(route_quantized(q, f.stream64) == ref.routing);
  }
}

TEST_CASE("a single overridden channel changes outputs only through its own contribution") {
  const MoEConfig cfg{1, 4, 16, 12, 2, 40};
  const MoEModel m = oracle::random_model(cfg, 21, 0.3f);
  const auto s = oracle::random_stream(cfg, 120, 22);
  const auto q8 = quantize_uniform(m, BitWidth::int8());
  auto q2 = q8;
  const std::uint32_t expert = 1, channel = 5;
  q2.experts[0][expert].overrides.emplace(
      channel, quantize_values(channel_values(m.layers[0].experts[expert], channel), BitWidth::int2()));

  const auto h8 = forward_quantized(q8, s);
  const auto h2 = forward_quantized(q2, s);
  const auto routing = route_quantized(q8, s);
  const auto d8 = dequantize(q8.experts[0][expert].channels[channel]);
  const auto d2 = dequantize(q2.experts[0][expert].overrides.at(channel));
  const std::size_t d = cfg.hidden_dim;
  std::size_t touched = 0;
  for (std::size_t p = 0; p < s.size(); ++p) {
    const auto experts = routing.experts(0, p);
    const auto it = std::find(experts.begin(), experts.end(), expert);
    if (it == experts.end()) {
      for (std::size_t c = 0; c < d; ++c) REQUIRE(h8(p, c) == h2(p, c));
      continue;
    }
    ++touched;
    const double gate = routing.gates(0, p)[static_cast<std::size_t>(it - experts.begin())];
    const auto emb = m.embeddings.row(s.tokens[p]);
    double a8 = 0.0, a2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      a8 += static_cast<double>(d8[c]) * emb[c];
      a2 += static_cast<double>(d2[c]) * emb[c];
    }
    a8 = std::max(a8, 0.0);
    a2 = std::max(a2, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      // Each output is rounded to float once, so the difference is exact up to
      // one unit in the last place of the larger output.
      const double expect = gate * (a2 * d2[d + i] - a8 * d8[d + i]);
      const float big = std::max(std::fabs(h2(p, i)), std::fabs(h8(p, i)));
      const double tol = std::nextafter(big, INFINITY) - big;
      CHECK(std::fabs(static_cast<double>(h2(p, i)) - h8(p, i) - expect) <= tol + 1e-12);
    }
  }
  CHECK(touched > 0);
}
