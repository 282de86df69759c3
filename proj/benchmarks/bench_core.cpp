#include <benchmark/benchmark.h>

#include "ueraser/augment.hpp"
#include "ueraser/data.hpp"
#include "ueraser/model.hpp"
#include "ueraser/rng.hpp"
#include "ueraser/trainer.hpp"

using namespace ueraser;

namespace {

Tensor random_batch(int bsz, int h, int w, std::uint64_t seed) {
  Tensor batch({bsz, 3, h, w});
  RngStream rng = derive_stream(seed, "bench.batch");
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.next_float();
  return batch;
}

void bm_forward_batch(benchmark::State& state) {
  const int bsz = static_cast<int>(state.range(0));
  const ModelParams p = ModelParams::init(16, 16, 4, 1);
  const Tensor batch = random_batch(bsz, 16, 16, 2);
  for (auto _ : state) {
    const Tensor logits = forward(p, batch);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(state.iterations() * bsz);
}

void bm_forward_backward(benchmark::State& state) {
  const int bsz = static_cast<int>(state.range(0));
  const ModelParams p = ModelParams::init(16, 16, 4, 1);
  const Tensor batch = random_batch(bsz, 16, 16, 2);
  std::vector<int> labels(static_cast<std::size_t>(bsz));
  for (int i = 0; i < bsz; ++i) labels[static_cast<std::size_t>(i)] = i % 4;
  for (auto _ : state) {
    GradTape tape;
    forward(p, batch, &tape);
    const Gradients g = backward(p, tape, labels);
    benchmark::DoNotOptimize(g.fc_b.data());
  }
  state.SetItemsProcessed(state.iterations() * bsz);
}

void bm_backward_input_only(benchmark::State& state) {
  const int bsz = static_cast<int>(state.range(0));
  const ModelParams p = ModelParams::init(16, 16, 4, 1);
  const Tensor batch = random_batch(bsz, 16, 16, 2);
  std::vector<int> labels(static_cast<std::size_t>(bsz));
  for (int i = 0; i < bsz; ++i) labels[static_cast<std::size_t>(i)] = i % 4;
  for (auto _ : state) {
    GradTape tape;
    forward(p, batch, &tape);
    const Tensor g = backward_input(p, tape, labels);
    benchmark::DoNotOptimize(g.data());
  }
  state.SetItemsProcessed(state.iterations() * bsz);
}

void bm_plasma_field(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    const Tensor f = plasma_field(side, side, 0.5f, seed++);
    benchmark::DoNotOptimize(f.data());
  }
}

void bm_pipeline_apply(benchmark::State& state) {
  const Tensor img = [] {
    Tensor t({3, 16, 16});
    RngStream rng = derive_stream(3, "bench.img");
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_float();
    return t;
  }();
  std::uint64_t i = 0;
  for (auto _ : state) {
    RngStream rng = policy_stream(5, 0, i++, 0);
    const PolicySample s = sample_policy(rng);
    const Tensor out = apply(s, img);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations());
}

void bm_max_loss_select(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  const ModelParams p = ModelParams::init(16, 16, 4, 1);
  const Tensor batch = random_batch(64, 16, 16, 4);
  std::vector<int> labels(64);
  std::vector<std::size_t> indices(64);
  for (int i = 0; i < 64; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 4;
    indices[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
  }
  int epoch = 0;
  for (auto _ : state) {
    const SelectResult sel = max_loss_select(p, batch, labels, k, 6, ++epoch, indices, true);
    benchmark::DoNotOptimize(sel.selected_losses.data());
  }
  state.SetItemsProcessed(state.iterations() * 64 * k);
}

}  // namespace

BENCHMARK(bm_forward_batch)->Arg(1)->Arg(32)->Arg(128);
BENCHMARK(bm_forward_backward)->Arg(32)->Arg(128);
BENCHMARK(bm_backward_input_only)->Arg(32)->Arg(128);
BENCHMARK(bm_plasma_field)->Arg(16)->Arg(32);
BENCHMARK(bm_pipeline_apply);
BENCHMARK(bm_max_loss_select)->Arg(1)->Arg(5);

BENCHMARK_MAIN();
