#include <benchmark/benchmark.h>

#include "cfft/counterfactual.hpp"
#include "cfft/model.hpp"
#include "cfft/rng.hpp"
#include "cfft/scm.hpp"
#include "cfft/training.hpp"

namespace {

using namespace cfft;

ScmSpec bench_spec(int side) {
  ScmSpec s;
  s.classes = 4;
  s.domains = 4;
  s.correlation = 0.95;
  s.image_side = side;
  s.patch_side = 4;
  s.noise_amp = 0.05f;
  return s;
}

void BM_GenerateSample(benchmark::State& state) {
  ScmSpec spec = bench_spec(static_cast<int>(state.range(0)));
  int i = 0;
  for (auto _ : state) {
    auto samples = generate_split(spec, Split::kIdTrain, 1, static_cast<uint64_t>(i++));
    benchmark::DoNotOptimize(samples[0].image.pixels.data());
  }
}
BENCHMARK(BM_GenerateSample)->Arg(16)->Arg(32);

void BM_ModelForward(benchmark::State& state) {
  ScmSpec spec = bench_spec(static_cast<int>(state.range(0)));
  ModelConfig mc = ModelConfig::for_spec(spec, static_cast<int>(state.range(1)), 2, 4);
  ModelParams params = init_model_params(mc, 1);
  ModelRunner runner(mc);
  runner.set_params(&params);
  Tensor<float> patches = generate_split(spec, Split::kIdTrain, 1, 3)[0].image.as_matrix();
  for (auto _ : state) {
    benchmark::DoNotOptimize(runner.logits(patches).data.data());
  }
}
BENCHMARK(BM_ModelForward)->Args({16, 32})->Args({32, 64});

void BM_ObjectiveStep(benchmark::State& state) {
  ScmSpec spec = bench_spec(static_cast<int>(state.range(0)));
  ModelConfig mc = ModelConfig::for_spec(spec, static_cast<int>(state.range(1)), 2, 4);
  ModelParams student = init_model_params(mc, 1);
  ModelParams teacher = init_model_params(mc, 2);
  auto records = generate_split(spec, Split::kIdTrain, 16, 5);
  std::vector<PatchImage> batch;
  std::vector<int> labels;
  for (auto& rec : records) {
    batch.push_back(rec.image);
    labels.push_back(rec.label);
  }
  ModelParams grads;
  for (auto _ : state) {
    ObjectiveParts parts =
        objective(mc, student, teacher, batch, labels, batch, 30.0, &grads, 1);
    benchmark::DoNotOptimize(parts.total);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch.size()));
}
BENCHMARK(BM_ObjectiveStep)->Args({16, 32})->Args({32, 64});

void BM_RelevanceMap(benchmark::State& state) {
  ScmSpec spec = bench_spec(static_cast<int>(state.range(0)));
  ModelConfig mc = ModelConfig::for_spec(spec, static_cast<int>(state.range(1)), 2, 4);
  ModelParams params = init_model_params(mc, 1);
  RelevanceScorer scorer(mc);
  scorer.set_params(&params);
  Tensor<float> patches = generate_split(spec, Split::kIdTrain, 1, 7)[0].image.as_matrix();
  for (auto _ : state) {
    RelevanceMap map = scorer.score(patches, 0);
    benchmark::DoNotOptimize(map.scores.data());
  }
}
BENCHMARK(BM_RelevanceMap)->Args({16, 32})->Args({32, 64});

void BM_CounterfactualBatch(benchmark::State& state) {
  ScmSpec spec = bench_spec(16);
  ModelConfig mc = ModelConfig::for_spec(spec, 32, 2, 4);
  ModelParams params = init_model_params(mc, 1);
  auto records = generate_split(spec, Split::kIdTrain, static_cast<int>(state.range(0)), 9);
  std::vector<PatchImage> batch;
  std::vector<int> labels;
  for (auto& rec : records) {
    batch.push_back(rec.image);
    labels.push_back(rec.label);
  }
  StrategyConfig strat;
  strat.masking = Masking::kObject;
  strat.refilling = Refilling::kSingle;
  strat.threshold = 0.5;
  uint64_t seed = 0;
  for (auto _ : state) {
    CounterfactualBatch cf = make_counterfactual_batch(mc, batch, labels, params, strat, seed++, 1);
    benchmark::DoNotOptimize(cf.images.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch.size()));
}
BENCHMARK(BM_CounterfactualBatch)->Arg(32)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
