#include <benchmark/benchmark.h>

#include "sbt/artifact.hpp"

using namespace sbt;

namespace {

TensorF random_input(const ModelConfig& c, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  TensorF x(Shape{batch, c.w, c.m});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  return x;
}

const char* kPresets[] = {"smd", "japanese_vowels", "weather"};

void BM_Reference(benchmark::State& state) {
  const ModelConfig c = preset_config(kPresets[state.range(0)], false);
  const FrozenModel f = TransformerModel(c, 1).freeze();
  const TensorF x = random_input(c, 1, 2);
  for (auto _ : state) benchmark::DoNotOptimize(f.forward(x));
  state.SetLabel(c.name);
}

void BM_Packed(benchmark::State& state) {
  const ModelConfig c = preset_config(kPresets[state.range(0)], false);
  const PackedRuntime rt(TransformerModel(c, 1).freeze());
  const TensorF x = random_input(c, 1, 2);
  for (auto _ : state) benchmark::DoNotOptimize(rt.infer(x));
  state.SetLabel(c.name);
}

// Step-T: last-row-only attention against the full masked score matrix.
void BM_StepT(benchmark::State& state) {
  const ModelConfig c = preset_config("smd", false);
  const PackedRuntime rt(TransformerModel(c, 1).freeze());
  const TensorF x = random_input(c, 1, 3);
  const bool fast = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(rt.infer(x, {}, fast));
  state.SetLabel(fast ? "fast path" : "full path");
}

void BM_Pack(benchmark::State& state) {
  const FrozenModel f = TransformerModel(preset_config("ecl", false), 1).freeze();
  std::size_t bytes = 0;
  for (auto _ : state) bytes = pack(f).size();
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * bytes));
}

void BM_Unpack(benchmark::State& state) {
  const auto bytes = pack(TransformerModel(preset_config("ecl", false), 1).freeze());
  for (auto _ : state) benchmark::DoNotOptimize(unpack(bytes));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * bytes.size()));
}

}  // namespace

BENCHMARK(BM_Reference)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Packed)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_StepT)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Pack)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Unpack)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
