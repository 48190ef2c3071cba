// Serial reference kernels against their OpenMP counterparts on the desk model.

#include <benchmark/benchmark.h>

#include "moeq/harness.hpp"

namespace {

using namespace moeq;

struct Fixture {
  MoEModel model;
  TokenStream stream;
  QuantizedModel qmodel;

  Fixture() {
    const DeskExperiment x = desk_experiment(42);
    model = x.model();
    const double mix[] = {0.5, 0.5};
    stream = x.stream(mix, 2048, 300, "bench");
    qmodel = quantize_uniform(model, BitWidth::int4());
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

Execution exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? Execution::serial : Execution::parallel;
}

void label(benchmark::State& state) {
  state.SetLabel(state.range(0) == 0 ? "serial" : "parallel");
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(fixture().stream.size()));
}

void BM_Route(benchmark::State& state) {
  const auto& f = fixture();
  std::vector<Matrix> routers;
  for (const auto& l : f.model.layers) routers.push_back(l.router);
  for (auto _ : state) benchmark::DoNotOptimize(route(f.model.config, f.model.embeddings, routers, f.stream, exec_of(state)));
  label(state);
}

void BM_Forward(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(forward(f.model, f.stream, nullptr, exec_of(state)));
  label(state);
}

void BM_Analyze(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(analyze(f.model, f.stream, exec_of(state)));
  label(state);
}

void BM_ForwardQuantized(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(forward_quantized(f.qmodel, f.stream, exec_of(state)));
  label(state);
}

}  // namespace

BENCHMARK(BM_Route)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Analyze)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardQuantized)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
