#include <benchmark/benchmark.h>

#include "mman/model.hpp"
#include "mman/synthetic.hpp"
#include "mman/train.hpp"

using namespace mman;

namespace {

struct DeskSetup {
    synth::SyntheticDataset ds;
    model::ModelConfig cfg;
    model::Model m;
    model::ModelParams params;
    model::ModelInput input;

    DeskSetup()
        : ds(synth::generate_synthetic_dataset({.seed = 1, .n_samples = 1})),
          cfg(model::ModelConfig::desk_preset(ds.vocab.size())),
          m(cfg),
          params(model::ModelParams::init(cfg, 1)),
          input(model::tensorize(ds.samples[0], cfg)) {}
};

void BM_DeskForwardEval(benchmark::State& state) {
    DeskSetup s;
    for (auto _ : state) {
        const auto out = s.m.forward(s.input, s.params, false, nullptr);
        benchmark::DoNotOptimize(out.capsules.norms.values().data());
    }
}
BENCHMARK(BM_DeskForwardEval);

void BM_DeskForwardBackward(benchmark::State& state) {
    DeskSetup s;
    std::mt19937_64 rng(3);
    for (auto _ : state) {
        s.params.zero_grads();
        Tape tape;
        TapeScope scope(tape);
        const auto out = s.m.forward(s.input, s.params, true, &rng);
        Tensor loss = s.m.total_loss(out, s.ds.samples[0].label, s.params);
        tape.backward(loss);
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_DeskForwardBackward);

void BM_DeskAdamStep(benchmark::State& state) {
    DeskSetup s;
    train::TrainConfig tcfg;
    train::AdamState adam(s.params);
    s.params.zero_grads();
    for (auto _ : state) {
        adam.step(s.params, 0.0005, tcfg);
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                            static_cast<std::int64_t>(s.params.coordinate_count()));
}
BENCHMARK(BM_DeskAdamStep);

} // namespace

BENCHMARK_MAIN();
